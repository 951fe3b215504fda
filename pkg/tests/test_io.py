import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from implicit_flow import __version__
from implicit_flow.io import (JsonlWriter, config_hash, load_obj, load_ppm, read_jsonl, save_obj,
                              save_ppm, write_json, write_manifest)
from implicit_flow.mesh import PolylineSet, TriangleMesh


def tetrahedron():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(4, 3)) / 3.0
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(v, f)


def test_obj_round_trip_is_bit_identical(tmp_path):
    m = tetrahedron()
    back = load_obj(save_obj(m, tmp_path / "t.obj"))
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


@given(arrays(np.float64, (6, 3), elements=st.floats(-1e6, 1e6, allow_subnormal=True)))
def test_any_float_survives_the_round_trip(tmp_path_factory, v):
    path = tmp_path_factory.mktemp("obj") / "m.obj"
    m = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    assert np.array_equal(load_obj(save_obj(m, path)).vertices, v)


def test_polyline_round_trip(tmp_path):
    a = np.linspace(0, 2 * np.pi, 7, endpoint=False)
    v = np.stack([np.cos(a), np.sin(a)], axis=1) * 0.3
    p = PolylineSet(v, np.stack([np.arange(7), (np.arange(7) + 1) % 7], axis=1))
    back = load_obj(save_obj(p, tmp_path / "c.obj"))
    assert isinstance(back, PolylineSet)
    assert np.array_equal(back.vertices, v) and np.array_equal(back.segments, p.segments)


def test_polygons_are_fan_triangulated_with_a_warning(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("# unit square\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.warns(UserWarning, match="fan-triangulated"):
        m = load_obj(path)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_extras_and_errors(tmp_path):
    path = tmp_path / "neg.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3//1 -2//1 -1//1 # tri\n")
    assert load_obj(path).faces.tolist() == [[0, 1, 2]]
    with pytest.raises(FileNotFoundError):
        load_obj(tmp_path / "missing.obj")
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(ValueError):
        load_obj(bad)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(-0.2, 1.2, size=(5, 7))
    back = load_ppm(save_ppm(img, tmp_path / "i.ppm"))
    assert back.shape == (5, 7)
    assert np.allclose(back, np.clip(img, 0, 1), atol=0.5 / 255 + 1e-12)
    raw = (tmp_path / "i.ppm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n") and len(raw) == 11 + 35
    with pytest.raises(ValueError):
        save_ppm(np.zeros((2, 2, 3)), tmp_path / "rgb.ppm")


def test_jsonl_and_json(tmp_path):
    with JsonlWriter(tmp_path / "d.jsonl") as w:
        w.record({"t": 1, "J": np.float64(0.5), "v": np.arange(2)})
        w.record({"t": 2})
    assert read_jsonl(tmp_path / "d.jsonl") == [{"t": 1, "J": 0.5, "v": [0, 1]}, {"t": 2}]
    write_json({"b": 1, "a": np.int64(2)}, tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": 2, "b": 1}


def test_manifest(tmp_path):
    (tmp_path / "sub").mkdir()
    files = [tmp_path / "sub" / "x.obj", tmp_path / "a.json"]
    for f in files:
        f.write_text("")
    write_manifest(tmp_path, "kind = 'fit'\n", files, {"seed": 4})
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["artifacts"] == ["a.json", "sub/x.obj"]
    assert man["config_sha256"] == config_hash("kind = 'fit'\n") == config_hash(b"kind = 'fit'\n")
    assert len(man["config_sha256"]) == 64
    assert man["version"] == __version__ and man["seed"] == 4
