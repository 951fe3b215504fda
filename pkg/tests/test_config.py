import pytest

from implicit_flow.config import KINDS, ConfigError, load_config, parse_config


def test_smoothing_defaults():
    cfg = parse_config("", "smooth")
    ev = cfg.evolution
    assert (ev.lr, ev.dt, ev.inner_steps) == (1e-6, 0.95, 200)
    assert ev.horizon == 20


def test_editing_defaults():
    text = ('[[handles]]\nselect = { box_min = [-1, -1, 0.4], box_max = [1, 1, 1] }\n'
            'rotate_degrees = 45.0\n')
    cfg = parse_config(text, "edit")
    ev = cfg.evolution
    assert (ev.horizon, ev.inner_steps, ev.eikonal_weight, ev.lr) == (20, 750, 1e-4, 2e-6)
    assert ev.mode == "advect"
    assert cfg.handles[0].rotate_degrees == 45.0
    assert (cfg.shell.k_stretch, cfg.shell.k_bend) == (1.0, 1.0)


def test_inverse_rendering_defaults():
    ev = parse_config("", "invrender").evolution
    assert (ev.lr, ev.dt, ev.weight_decay, ev.inner_steps) == (2e-6, 1e-4, 0.1, 1)


def test_file_values_override_kind_defaults():
    cfg = parse_config("[evolution]\nlr = 3e-6\ninner_steps = 50\n", "smooth")
    assert (cfg.evolution.lr, cfg.evolution.inner_steps, cfg.evolution.dt) == (3e-6, 50, 0.95)


def test_unknown_key_reports_its_line():
    text = "kind = 'fit'\n[fit]\nitrations = 10\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 3 and info.value.key == "fit.itrations"
    assert str(info.value).startswith("line 3: fit.itrations")


@pytest.mark.parametrize("text, key", [
    ("[fit]\niterations = 'many'\n", "fit.iterations"),
    ("[evolution]\npersistent_optimizer = 1\n", "evolution.persistent_optimizer"),
    ("[evolution]\nbounds = [1.0, -1.0]\n", "evolution.bounds"),
    ("[evolution]\nmode = 'lagrangian'\n", "evolution.mode"),
    ("[flow]\nkind = 'twirl'\n", "flow.kind"),
    ("seed = 1.5\n", "seed"),
    ("colour = 'red'\n", "colour"),
])
def test_invalid_values(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "fit")
    assert info.value.key == key


def test_kind_errors():
    with pytest.raises(ConfigError):
        parse_config("")
    with pytest.raises(ConfigError):
        parse_config("kind = 'dance'\n")
    assert set(KINDS) >= {"fit", "smooth", "mcf", "invrender", "edit", "eval", "baseline-compare"}


def test_kind_specific_requirements():
    with pytest.raises(ConfigError, match="handles"):
        parse_config("", "edit")
    with pytest.raises(ConfigError, match="io.init"):
        parse_config("", "eval")
    text = "[[handles]]\nselect = { sphere_center = [0, 0, 0] }\n"
    with pytest.raises(ConfigError):
        parse_config(text, "edit")


def test_malformed_toml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config("kind = 'fit'\n[fit\n")
    assert info.value.line == 2
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ConfigError) as info:
        parse_config(f"[io]\nout = '{blocker / 'run'}'\n", "fit")
    assert info.value.key == "io.out"


def test_load_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("kind = 'mcf'\nseed = 7\n[shape]\nshape = 'sphere'\nradius = 0.6\n")
    cfg = load_config(path)
    assert cfg.kind == "mcf" and cfg.seed == 7 and cfg.shape.radius == 0.6
    assert cfg.evolution.horizon == 30
    assert cfg.source == path.read_text()
    assert load_config(path, "smooth").kind == "smooth"
