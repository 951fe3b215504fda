"""Mesh, image, diagnostics and manifest files."""

from __future__ import annotations

import hashlib
import json
import warnings
from pathlib import Path

import numpy as np

from .mesh import PolylineSet, TriangleMesh


def _fmt(x: float) -> str:
    # 17 significant digits round-trip any float64 exactly
    return format(float(x), ".17g")


def save_obj(mesh, path) -> Path:
    """Write a triangle mesh (``f``) or a 2D polyline set (``l``, z = 0)."""
    path = Path(path)
    lines = []
    if isinstance(mesh, PolylineSet):
        for x, y in mesh.vertices:
            lines.append(f"v {_fmt(x)} {_fmt(y)} 0")
        for a, b in mesh.segments:
            lines.append(f"l {a + 1} {b + 1}")
    else:
        for v in mesh.vertices:
            lines.append("v " + " ".join(_fmt(c) for c in v))
        for f in mesh.faces:
            lines.append("f " + " ".join(str(int(i) + 1) for i in f))
    path.write_text("\n".join(lines) + "\n")
    return path


def _index(token: str, n_vertices: int) -> int:
    i = int(token.split("/")[0])
    return i - 1 if i > 0 else n_vertices + i


def load_obj(path):
    """Read an OBJ file.

    Polygons with more than three corners are fan-triangulated (with a
    warning). A file with only ``l`` elements and z = 0 everywhere comes
    back as a 2D :class:`PolylineSet`.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such OBJ file: {path}")
    verts, faces, segs = [], [], []
    fanned = 0
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                verts.append([float(a) for a in args[:3]])
            elif tag == "f":
                idx = [_index(a, len(verts)) for a in args]
                if len(idx) < 3:
                    raise ValueError("face needs at least three vertices")
                if len(idx) > 3:
                    fanned += 1
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            elif tag == "l":
                idx = [_index(a, len(verts)) for a in args]
                segs.extend([idx[k], idx[k + 1]] for k in range(len(idx) - 1))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if fanned:
        warnings.warn(f"{path}: fan-triangulated {fanned} non-triangular face(s)", stacklevel=2)
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    if segs and not faces and np.all(v[:, 2] == 0):
        return PolylineSet(v[:, :2], np.array(segs, dtype=np.int64))
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(v)):
        raise ValueError(f"{path}: face index out of range")
    return TriangleMesh(v, f)


def save_ppm(image, path, vmax: float = 1.0) -> Path:
    """8-bit binary greyscale PGM/PPM (``P5``); values are clipped to [0, vmax]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2D greyscale image")
    data = np.round(np.clip(img / vmax, 0.0, 1.0) * 255).astype(np.uint8)
    path = Path(path)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())
    return path


def load_ppm(path) -> np.ndarray:
    """Inverse of :func:`save_ppm`; returns values in [0, 1]."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode())
        pos = end
    if fields[0] != "P5":
        raise ValueError("only binary P5 images are supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(raw[pos + 1:], dtype=dtype, count=w * h)
    return data.reshape(h, w).astype(np.float64) / maxval


class JsonlWriter:
    """Append one JSON object per line; usable as the ``sink`` of ``evolve``."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w")

    def write(self, text: str) -> None:
        self._fh.write(text)
        self._fh.flush()

    def record(self, obj) -> None:
        self.write(json.dumps(obj, default=_jsonable) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def config_hash(text: str | bytes) -> str:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).hexdigest()


def write_manifest(out_dir, config_text, artifacts, extra=None) -> Path:
    """``manifest.json`` with the config hash, package version and artifact list."""
    from . import __version__

    out_dir = Path(out_dir)
    root = out_dir.resolve()
    entries = sorted(Path(a).resolve().relative_to(root).as_posix() for a in artifacts)
    manifest = {"config_sha256": config_hash(config_text), "version": __version__,
                "artifacts": entries}
    if extra:
        manifest.update(extra)
    return write_json(manifest, out_dir / "manifest.json")
