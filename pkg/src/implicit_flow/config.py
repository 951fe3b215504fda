"""TOML experiment configuration.

Every table maps onto a dataclass and unknown keys are rejected, so a typo
in a hyperparameter name fails loudly instead of silently using a default.
Per-kind defaults (:data:`KIND_DEFAULTS`) are applied before the file's own
values.
"""

from __future__ import annotations

import dataclasses
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

KINDS = ("fit", "smooth", "mcf", "invrender", "edit", "eval", "baseline-compare")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is set when the offending key can be located."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = ""
        if line is not None:
            where = f"line {line}: "
        if key:
            where += f"{key}: "
        super().__init__(where + message)


@dataclass
class ShapeSpec:
    """An analytic shape or an OBJ file (turned into a mesh SDF)."""

    shape: str = "sphere"
    center: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 0.5
    half_extent: float | list[float] = 0.5
    normal: list[float] | None = None
    offset: float = 0.0
    minor_radius: float = 0.2
    radii: list[float] | None = None
    lobes: list | None = None
    smoothness: float = 0.1
    noise_amplitude: float = 0.02
    noise_frequency: float = 12.0
    obj: str | None = None


@dataclass
class Architecture:
    width: int = 64
    depth: int = 4
    omega0: float = 30.0


@dataclass
class FitSection:
    iterations: int = 2000
    batch_size: int = 2048
    lr: float = 3e-4
    final_lr_ratio: float = 0.1
    eikonal_weight: float = 0.1
    eikonal_batch: int = 512
    pool_size: int = 100_000
    near_sigma: float = 0.05
    uniform_fraction: float = 0.5
    tolerance: float = 5e-3
    grad_tolerance: float = 0.1
    check: bool = False


@dataclass
class EvolutionSection:
    dt: float = 0.95
    lr: float = 1e-6
    inner_steps: int = 200
    eikonal_weight: float = 1e-3
    weight_decay: float = 0.0
    resolution: int = 120
    bounds: list[float] = field(default_factory=lambda: [-1.0, 1.0])
    jitter: int = 0
    horizon: int = 20
    eikonal_sample_count: int = 2048
    eikonal_sigma: float = 0.05
    mode: str = "eulerian"
    persistent_optimizer: bool = False
    vertex_batch: int | None = None
    divergence_factor: float = 10.0


@dataclass
class FlowSection:
    """Flow parameters; which ones matter depends on the experiment kind.

    ``kind`` is only read by ``baseline-compare`` ("normal" or "tangential").
    """

    kind: str = "normal"
    rate: float = 1.0
    speed: float = 0.05
    smooth_rate: float = 0.0
    laplacian: str = "uniform"
    albedo: float = 0.55
    axis: list[float] = field(default_factory=lambda: [0.0, 0.0, 1.0])


@dataclass
class CameraSection:
    count: int = 12
    radius: float = 2.5
    size: int = 64
    fov_degrees: float = 40.0
    seed: int = 0


@dataclass
class Selection:
    """Vertices inside a sphere (``center``, ``radius``) or a box (``min``, ``max``)."""

    sphere_center: list[float] | None = None
    sphere_radius: float | None = None
    box_min: list[float] | None = None
    box_max: list[float] | None = None


@dataclass
class HandleSpec:
    """Selected vertices follow a rigid motion reached gradually over the horizon."""

    select: Selection = field(default_factory=Selection)
    rotate_axis: list[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])
    rotate_degrees: float = 0.0
    pivot: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    translate: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class ShellSection:
    k_stretch: float = 1.0
    k_bend: float = 1.0
    method: str = "direct"
    laplacian: str = "uniform"


@dataclass
class IoSection:
    out: str = "out"
    init: str | None = None
    checkpoint: str | None = None
    log_every: int = 1
    eval_samples: int = 20_000


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    shape: ShapeSpec = field(default_factory=ShapeSpec)
    target: ShapeSpec | None = None
    architecture: Architecture = field(default_factory=Architecture)
    fit: FitSection = field(default_factory=FitSection)
    evolution: EvolutionSection = field(default_factory=EvolutionSection)
    flow: FlowSection = field(default_factory=FlowSection)
    cameras: CameraSection = field(default_factory=CameraSection)
    handles: list[HandleSpec] = field(default_factory=list)
    frozen: list[Selection] = field(default_factory=list)
    shell: ShellSection = field(default_factory=ShellSection)
    io: IoSection = field(default_factory=IoSection)
    source: str = ""


# recipe defaults, overridable from the file
KIND_DEFAULTS = {
    "smooth": {"evolution": {"lr": 1e-6, "dt": 0.95, "inner_steps": 200, "horizon": 20},
               "flow": {"rate": 3.0},
               "shape": {"shape": "noisy-sphere", "radius": 0.6}},
    "mcf": {"evolution": {"lr": 1e-6, "dt": 0.95, "inner_steps": 200, "horizon": 30},
            "flow": {"rate": 6.0},
            "shape": {"shape": "blob", "radius": 0.45, "smoothness": 0.08,
                      "lobes": [[[0.52, 0.0, 0.0], 0.14], [[-0.52, 0.0, 0.0], 0.14]]}},
    "invrender": {"evolution": {"lr": 2e-6, "dt": 1e-4, "weight_decay": 0.1, "inner_steps": 1,
                                "horizon": 750, "persistent_optimizer": True},
                  "flow": {"smooth_rate": 70.0},
                  "target": {"shape": "torus", "radius": 0.45, "minor_radius": 0.2}},
    "edit": {"evolution": {"lr": 2e-6, "inner_steps": 750, "horizon": 20, "eikonal_weight": 1e-4,
                           "mode": "advect"},
             "shape": {"shape": "cylinder", "radius": 0.25, "half_extent": 0.5}},
}

_NESTED = {
    "shape": ShapeSpec, "target": ShapeSpec, "architecture": Architecture, "fit": FitSection,
    "evolution": EvolutionSection, "flow": FlowSection, "cameras": CameraSection,
    "shell": ShellSection, "io": IoSection,
}


def _locate(text: str, key: str) -> int | None:
    name = key.rsplit(".", 1)[-1]
    pat = re.compile(rf"^\s*{re.escape(name)}\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        if pat.match(line):
            return i
    return None


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_type(value, annotation: str, key: str, text: str):
    ann = annotation.replace(" ", "")
    optional = "None" in ann
    if value is None:
        if optional:
            return None
        raise ConfigError("value required", key, _locate(text, key))
    bad = False
    if ann.startswith("int") and (isinstance(value, bool) or not isinstance(value, int)):
        bad = True
    elif ann.startswith("float") and not ann.startswith("float|list"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad = True
        else:
            value = float(value)
    elif ann.startswith("bool") and not isinstance(value, bool):
        bad = True
    elif ann.startswith("str") and not isinstance(value, str):
        bad = True
    elif ann.startswith("list[float]"):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            bad = True
        else:
            value = [float(v) for v in value]
    if bad:
        raise ConfigError(f"expected {annotation}, got {type(value).__name__}", key, _locate(text, key))
    return value


def _build(cls, table, prefix: str, text: str):
    if not isinstance(table, dict):
        raise ConfigError("expected a table", prefix, _locate(text, prefix))
    names = {f.name: f for f in dataclasses.fields(cls)}
    for k in table:
        if k not in names:
            key = f"{prefix}.{k}" if prefix else k
            raise ConfigError("unknown key", key, _locate(text, k))
    kwargs = {}
    for k, v in table.items():
        key = f"{prefix}.{k}" if prefix else k
        f = names[k]
        if cls is HandleSpec and k == "select":
            kwargs[k] = _build(Selection, v, key, text)
        else:
            kwargs[k] = _check_type(v, str(f.type), key, text)
    return cls(**kwargs)


def _selection_ok(sel: Selection) -> bool:
    sphere = sel.sphere_center is not None and sel.sphere_radius is not None
    box = sel.box_min is not None and sel.box_max is not None
    return sphere != box


def parse_config(text: str, kind: str | None = None) -> ExperimentConfig:
    """Parse TOML ``text``; ``kind`` (e.g. from the command line) wins over the file."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed TOML ({exc})", None, int(m.group(1)) if m else None) from None
    file_kind = data.pop("kind", None)
    kind = kind or file_kind
    if kind is None:
        raise ConfigError("experiment kind missing", "kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}",
                          "kind", _locate(text, "kind"))
    data = _merge(KIND_DEFAULTS.get(kind, {}), data)

    kwargs = {"kind": kind, "source": text}
    for k, v in data.items():
        if k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v, k, text)
        elif k == "seed":
            kwargs[k] = _check_type(v, "int", k, text)
        elif k == "handles":
            if not isinstance(v, list):
                raise ConfigError("expected an array of tables", k, _locate(text, k))
            kwargs[k] = [_build(HandleSpec, h, f"handles[{i}]", text) for i, h in enumerate(v)]
        elif k == "frozen":
            if not isinstance(v, list):
                raise ConfigError("expected an array of tables", k, _locate(text, k))
            kwargs[k] = [_build(Selection, s, f"frozen[{i}]", text) for i, s in enumerate(v)]
        else:
            raise ConfigError("unknown key", k, _locate(text, k))
    cfg = ExperimentConfig(**kwargs)
    _validate(cfg, text)
    return cfg


def _validate(cfg: ExperimentConfig, text: str) -> None:
    if cfg.kind == "edit" and not cfg.handles:
        raise ConfigError("edit needs at least one [[handles]] entry", "handles")
    for i, h in enumerate(cfg.handles):
        if not _selection_ok(h.select):
            raise ConfigError("give either sphere_center+sphere_radius or box_min+box_max",
                              f"handles[{i}].select")
    for i, s in enumerate(cfg.frozen):
        if not _selection_ok(s):
            raise ConfigError("give either sphere_center+sphere_radius or box_min+box_max",
                              f"frozen[{i}]")
    if cfg.kind == "eval" and cfg.io.init is None:
        raise ConfigError("eval needs io.init (a checkpoint to evaluate)", "io.init")
    ev = cfg.evolution
    if ev.mode not in ("eulerian", "advect"):
        raise ConfigError(f"unknown mode {ev.mode!r}", "evolution.mode", _locate(text, "mode"))
    if len(ev.bounds) != 2 or not ev.bounds[0] < ev.bounds[1]:
        raise ConfigError("bounds must be [min, max] with min < max", "evolution.bounds",
                          _locate(text, "bounds"))
    if cfg.flow.kind not in ("normal", "tangential"):
        raise ConfigError(f"unknown flow kind {cfg.flow.kind!r}", "flow.kind", _locate(text, "kind"))
    out = Path(cfg.io.out)
    probe = out if out.exists() else out.parent if str(out.parent) else Path(".")
    while not probe.exists() and probe != probe.parent:
        probe = probe.parent
    if not probe.is_dir():
        raise ConfigError(f"output path {out} is not a directory", "io.out", _locate(text, "out"))


def load_config(path, kind: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text(), kind)
