"""Closed-form level-set functions and SDF fitting of sine MLPs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import mlp
from .optim import Adam

log = logging.getLogger(__name__)

SHAPES = (
    "sphere", "plane", "box", "circle2d", "square2d", "mesh-sdf",
    # procedural stand-ins used by the experiment recipes
    "torus", "cylinder", "ellipsoid", "blob", "noisy-sphere",
)


class NotWatertightError(ValueError):
    pass


class FitNotConverged(RuntimeError):
    """Raised by :func:`fit_sdf` when tolerances are unmet; carries the result."""

    def __init__(self, params, value_error, grad_error, message):
        super().__init__(message)
        self.params = params
        self.value_error = value_error
        self.grad_error = grad_error


@dataclass
class AnalyticField:
    """A level-set function given in closed form (or by a watertight mesh).

    Exact signed distances for sphere, plane, box, circle2d, square2d,
    torus, cylinder and mesh-sdf; ellipsoid, blob and noisy-sphere are
    SDF-like approximations with ``|grad| ~ 1`` near the surface.
    """

    shape: str
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0
    half_extent: np.ndarray | float = 0.5
    normal: np.ndarray | None = None
    offset: float = 0.0
    minor_radius: float = 0.25
    radii: np.ndarray | None = None
    lobes: list | None = None
    smoothness: float = 0.1
    noise_amplitude: float = 0.02
    noise_frequency: float = 12.0
    mesh: object | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.shape in ("circle2d", "square2d") and self.center.shape == (3,):
            self.center = self.center[:2]
        if self.shape in ("sphere", "circle2d", "cylinder", "noisy-sphere") and self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.shape in ("box", "square2d", "cylinder"):
            he = np.asarray(self.half_extent, dtype=np.float64)
            if np.any(he <= 0):
                raise ValueError("half extents must be positive")
        if self.shape == "plane":
            n = np.asarray(self.normal if self.normal is not None else [0, 0, 1], dtype=np.float64)
            norm = np.linalg.norm(n)
            if norm == 0:
                raise ValueError("plane normal must be nonzero")
            self.normal = n / norm
            self.center = np.zeros_like(self.normal)
        if self.shape == "torus" and not (0 < self.minor_radius < self.radius):
            raise ValueError("torus needs 0 < minor_radius < radius")
        if self.shape == "ellipsoid":
            self.radii = np.asarray(self.radii if self.radii is not None else [0.6, 0.4, 0.3], dtype=np.float64)
            if np.any(self.radii <= 0):
                raise ValueError("ellipsoid radii must be positive")
        if self.shape == "mesh-sdf":
            if self.mesh is None:
                raise ValueError("mesh-sdf needs a mesh")
            self._mesh_sdf = MeshDistance(self.mesh.vertices, self.mesh.faces)

    @property
    def dim(self) -> int:
        if self.shape in ("circle2d", "square2d"):
            return 2
        if self.shape == "plane":
            return self.normal.shape[0]
        return 3

    def __call__(self, x):
        return eval_sdf(self, x)

    def gradient(self, x, h: float = 1e-6) -> np.ndarray:
        """Central-difference gradient; analytic where it is trivial."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.shape == "plane":
            return np.broadcast_to(self.normal, x.shape).copy()
        if self.shape in ("sphere", "circle2d"):
            r = x - self.center
            return r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-300)
        g = np.empty_like(x)
        for k in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[k] = h
            g[:, k] = (eval_sdf(self, x + e) - eval_sdf(self, x - e)) / (2 * h)
        return g


def _box_sdf(p, he):
    q = np.abs(p) - he
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _smin(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def eval_sdf(f: AnalyticField, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("query points must be finite")
    if x.shape[1] != f.dim:
        raise ValueError(f"{f.shape} expects {f.dim}-d points, got {x.shape[1]}")
    s = f.shape
    p = x - f.center if s not in ("plane", "mesh-sdf") else x
    if s in ("sphere", "circle2d"):
        out = np.linalg.norm(p, axis=1) - f.radius
    elif s == "plane":
        out = x @ f.normal - f.offset
    elif s in ("box", "square2d"):
        out = _box_sdf(p, np.broadcast_to(np.asarray(f.half_extent, dtype=np.float64), (p.shape[1],)))
    elif s == "torus":
        q = np.stack([np.hypot(p[:, 0], p[:, 1]) - f.radius, p[:, 2]], axis=1)
        out = np.linalg.norm(q, axis=1) - f.minor_radius
    elif s == "cylinder":
        # capped cylinder along z: radius, half height = half_extent
        hh = float(np.asarray(f.half_extent).reshape(-1)[0])
        d = np.stack([np.hypot(p[:, 0], p[:, 1]) - f.radius, np.abs(p[:, 2]) - hh], axis=1)
        out = np.minimum(d.max(axis=1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=1)
    elif s == "ellipsoid":
        k0 = np.linalg.norm(p / f.radii, axis=1)
        k1 = np.linalg.norm(p / f.radii ** 2, axis=1)
        out = k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)
    elif s == "blob":
        out = np.linalg.norm(p, axis=1) - f.radius
        for c, r in (f.lobes or []):
            lobe = np.linalg.norm(p - np.asarray(c, dtype=np.float64), axis=1) - r
            out = _smin(out, lobe, f.smoothness)
    elif s == "noisy-sphere":
        # angular ripple, so almost none of it is low-order on the sphere;
        # the sin(polar) factor keeps it bounded at the pole
        k = f.noise_frequency
        rho = np.hypot(p[:, 0], p[:, 1])
        polar = np.arctan2(rho, p[:, 2])
        azimuth = np.arctan2(p[:, 1], p[:, 0])
        bump = np.sin(k * polar) * np.sin(k * azimuth) * np.sin(polar)
        t = np.clip(p[:, 2] / 0.1, 0.0, 1.0)
        ramp = t * t * (3 - 2 * t)
        out = np.linalg.norm(p, axis=1) - f.radius - f.noise_amplitude * bump * ramp
    elif s == "mesh-sdf":
        out = f._mesh_sdf(x)
    return float(out[0]) if single else out


# --------------------------------------------------------------------------
# mesh distance


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points p; all ``(n, 3)``.

    Region-based projection (Voronoi regions of vertices, edges, face).
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(p.shape[0], dtype=bool)

    def put(mask, val):
        m = mask & ~done
        out[m] = val[m] if val.ndim == 2 else val
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        put((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones_like(done), a + v[:, None] * ab + w[:, None] * ac)
    return out


def _watertight(faces: np.ndarray) -> bool:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


class MeshDistance:
    """Signed distance to a watertight triangle mesh.

    Unsigned part: exact point-triangle distance with AABB culling against
    a nearest-vertex upper bound. Sign: parity of crossings along three
    slightly jittered rays, majority vote.
    """

    def __init__(self, vertices, faces, chunk: int = 256):
        self.v = np.asarray(vertices, dtype=np.float64)
        self.f = np.asarray(faces, dtype=np.int64)
        if len(self.f) == 0 or not _watertight(self.f):
            raise NotWatertightError("mesh-sdf requires a watertight triangle mesh")
        tri = self.v[self.f]
        self.tri = tri
        self.lo = tri.min(axis=1)
        self.hi = tri.max(axis=1)
        self.tree = cKDTree(self.v)
        self.chunk = chunk
        rng = np.random.default_rng(12345)
        dirs = np.array([0.0, 0.0, 1.0]) + rng.normal(scale=0.05, size=(3, 3))
        self.ray_dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def unsigned(self, x: np.ndarray) -> np.ndarray:
        ub, _ = self.tree.query(x)
        out = ub.copy()
        for i in range(0, len(x), self.chunk):
            p = x[i:i + self.chunk]
            gap = np.maximum(self.lo[None] - p[:, None], 0) + np.maximum(p[:, None] - self.hi[None], 0)
            lb = np.linalg.norm(gap, axis=2)
            pi, ti = np.nonzero(lb <= ub[i:i + self.chunk, None] + 1e-12)
            t = self.tri[ti]
            q = closest_point_on_triangles(p[pi], t[:, 0], t[:, 1], t[:, 2])
            d = np.linalg.norm(p[pi] - q, axis=1)
            best = np.full(len(p), np.inf)
            np.minimum.at(best, pi, d)
            out[i:i + self.chunk] = np.minimum(out[i:i + self.chunk], best)
        return out

    def inside(self, x: np.ndarray) -> np.ndarray:
        votes = np.zeros(len(x), dtype=int)
        for d in self.ray_dirs:
            votes += _crossings(x, d, self.tri) % 2
        return votes >= 2

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        d = self.unsigned(x)
        return np.where(self.inside(x), -d, d)


def _crossings(x, d, tri, chunk=512):
    """Number of triangles hit by rays x + t d, t > 0."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    counts = np.zeros(len(x), dtype=int)
    for i in range(0, len(x), chunk):
        p = x[i:i + chunk]
        tvec = p[:, None, :] - tri[None, :, 0]
        u = np.einsum("ntj,tj->nt", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[None])
        v = np.einsum("j,ntj->nt", d, qvec) * inv
        t = np.einsum("tj,ntj->nt", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        counts[i:i + chunk] = hit.sum(axis=1)
    return counts


# --------------------------------------------------------------------------
# sampling


def sample_surface(f: AnalyticField, n: int, rng, bounds=(-1.0, 1.0)) -> np.ndarray:
    """Points on (or within ~1e-6 of) the zero set."""
    if f.shape == "mesh-sdf":
        tri = f._mesh_sdf.tri
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        idx = rng.choice(len(tri), size=n, p=area / area.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        t = tri[idx]
        return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
                + (r1 * r2)[:, None] * t[:, 2])
    lo, hi = bounds
    out = []
    have = 0
    while have < n:
        x = rng.uniform(lo, hi, size=(2 * n, f.dim))
        for _ in range(8):
            phi = eval_sdf(f, x)
            g = f.gradient(x)
            gn = np.sum(g * g, axis=1)
            step = np.where(gn > 1e-12, phi / np.maximum(gn, 1e-12), 0.0)
            x = x - step[:, None] * g
        phi = eval_sdf(f, x)
        keep = (np.abs(phi) < 1e-6) & np.all((x >= lo) & (x <= hi), axis=1)
        out.append(x[keep])
        have += int(keep.sum())
    return np.concatenate(out)[:n]


def training_samples(f: AnalyticField, n: int, rng, bounds=(-1.0, 1.0),
                     sigma: float = 0.05, surface=None, uniform_fraction: float = 0.5) -> np.ndarray:
    """Uniform box samples mixed with Gaussian-perturbed surface samples."""
    n_uni = int(round(n * uniform_fraction))
    uni = rng.uniform(bounds[0], bounds[1], size=(n_uni, f.dim))
    if surface is None:
        surface = sample_surface(f, n - n_uni, rng, bounds)
    else:
        surface = surface[rng.integers(0, len(surface), size=n - n_uni)]
    near = surface + rng.normal(scale=sigma, size=surface.shape)
    return np.concatenate([uni, near])


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitConfig:
    hidden_width: int = 64
    depth: int = 4
    omega0: float = 30.0
    iterations: int = 2000
    batch_size: int = 2048
    lr: float = 1e-4
    final_lr_ratio: float = 0.1
    eikonal_weight: float = 0.1
    eikonal_batch: int = 512
    pool_size: int = 100_000
    near_sigma: float = 0.05
    uniform_fraction: float = 0.5
    tolerance: float = 5e-3
    grad_tolerance: float = 0.1
    eval_samples: int = 20_000
    log_every: int = 100
    bounds: tuple[float, float] = (-1.0, 1.0)


@dataclass
class FitReport:
    value_error: float
    grad_error: float
    loss_windows: list[float]
    iterations: int


def fit_error(params: mlp.MlpParams, f: AnalyticField, rng, n: int = 20_000,
              bounds=(-1.0, 1.0)) -> tuple[float, float]:
    """Mean |Phi - phi| on fresh uniform samples and mean ||grad Phi| - 1| on
    surface samples."""
    x = rng.uniform(bounds[0], bounds[1], size=(n, f.dim))
    value_err = float(np.mean(np.abs(mlp.evaluate(params, x) - eval_sdf(f, x))))
    s = sample_surface(f, min(n, 4000), rng, bounds)
    g = mlp.grad_input(params, s)
    grad_err = float(np.mean(np.abs(np.linalg.norm(g, axis=1) - 1.0)))
    return value_err, grad_err


def fit_sdf(target: AnalyticField, config: FitConfig | None = None, seed: int = 0,
            init: mlp.MlpParams | None = None, check: bool = True,
            return_report: bool = False):
    """Fit a SIREN to ``target`` by distance regression plus an eikonal term.

    Training points are drawn from a fixed pool (half uniform in the domain,
    half near-surface) built once from ``seed``. The learning rate decays
    geometrically to ``final_lr_ratio * lr``.
    """
    cfg = config or FitConfig()
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else mlp.init_siren(
        target.dim, cfg.hidden_width, cfg.depth, cfg.omega0, seed=seed)
    surface = sample_surface(target, max(cfg.pool_size // 2, 1), rng, cfg.bounds)
    pool = training_samples(target, cfg.pool_size, rng, cfg.bounds, cfg.near_sigma, surface,
                            cfg.uniform_fraction)
    pool_sdf = eval_sdf(target, pool)

    opt = Adam(lr=cfg.lr)
    theta = params.theta.copy()
    decay = cfg.final_lr_ratio ** (1.0 / max(cfg.iterations - 1, 1))
    losses = []
    windows = []
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(pool), size=cfg.batch_size)
        x = pool[idx]
        p = params.with_theta(theta)
        jet = mlp.Jet(p, x, order=0)
        r = jet.value - pool_sdf[idx]
        loss = np.mean(r * r)
        grad = jet.backward(2.0 * r / len(x))
        if cfg.eikonal_weight > 0:
            xe = x[:cfg.eikonal_batch]
            ejet = mlp.Jet(p, xe, order=1)
            gn = np.linalg.norm(ejet.grad, axis=1)
            e = gn - 1.0
            loss += cfg.eikonal_weight * np.mean(e * e)
            gg = (cfg.eikonal_weight * 2.0 * e / np.maximum(gn, 1e-12) / len(xe))[:, None] * ejet.grad
            grad += ejet.backward(None, gg)
        theta = opt.step(theta, grad, lr=cfg.lr * decay ** it)
        losses.append(loss)
        if (it + 1) % cfg.log_every == 0:
            windows.append(float(np.mean(losses[-cfg.log_every:])))
            log.debug("fit_sdf iter %d loss %.3e", it + 1, windows[-1])
        if not np.isfinite(loss):
            raise FloatingPointError(f"fit_sdf diverged at iteration {it}")
    params = params.with_theta(theta)
    value_err, grad_err = fit_error(params, target, np.random.default_rng(seed + 1),
                                    cfg.eval_samples, cfg.bounds)
    report = FitReport(value_err, grad_err, windows, cfg.iterations)
    if check and (value_err >= cfg.tolerance or grad_err >= cfg.grad_tolerance):
        raise FitNotConverged(
            params, value_err, grad_err,
            f"fit_sdf did not converge: mean |Phi-phi| = {value_err:.3e} "
            f"(tol {cfg.tolerance:.1e}), mean ||grad|-1| = {grad_err:.3e} "
            f"(tol {cfg.grad_tolerance:.1e})")
    return (params, report) if return_report else params


# --------------------------------------------------------------------------
# uniform access to anything that evaluates to a level-set function


def field_values(field, x: np.ndarray) -> np.ndarray:
    """Values of a network, an analytic field or a plain callable at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(field, mlp.MlpParams):
        return mlp.evaluate(field, x)
    return np.asarray(field(x), dtype=np.float64).reshape(len(x))


def field_gradients(field, x: np.ndarray, chunk: int = 16384) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(field, mlp.MlpParams):
        return np.concatenate([mlp.grad_input(field, x[i:i + chunk]).reshape(-1, x.shape[1])
                               for i in range(0, len(x), chunk)]) if len(x) else x.copy()
    if hasattr(field, "gradient"):
        return np.asarray(field.gradient(x), dtype=np.float64).reshape(x.shape)
    h = 1e-6
    g = np.empty_like(x)
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        g[:, k] = (field_values(field, x + e) - field_values(field, x - e)) / (2 * h)
    return g
