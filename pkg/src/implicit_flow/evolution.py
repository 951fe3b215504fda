"""Eulerian evolution of a network level set under an explicit surface flow,
plus the two parameter-space baselines it is compared against."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import mlp
from .extraction import GridSpec, extract, sphere_trace_batch
from .fields import field_gradients, field_values
from .mesh import chamfer
from .optim import Adam

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message, history=None, params=None):
        super().__init__(message)
        self.history = history or []
        self.params = params


@dataclass
class EvolutionConfig:
    dt: float = 0.95
    lr: float = 1e-6
    inner_steps: int = 200
    eikonal_weight: float = 1e-3
    weight_decay: float = 0.0
    grid: GridSpec = field(default_factory=lambda: GridSpec.cube(120, jitter=3))
    horizon: int = 20
    eikonal_sample_count: int = 2048
    eikonal_sigma: float = 0.05
    # "eulerian": targets Phi - dt grad(Phi).V at the vertices;
    # "advect": zero targets at the displaced vertices x + V
    mode: str = "eulerian"
    # keep one Adam state for the whole run instead of one per time step
    persistent_optimizer: bool = True
    # random subset of vertices per inner step (None uses all of them)
    vertex_batch: int | None = None
    divergence_factor: float = 10.0
    # stop the inner loop once the gradient norm falls to this level; Adam
    # normalises step sizes, so it would otherwise amplify rounding noise
    grad_tol: float = 1e-12
    # return the best inner iterate; with very few inner steps the last one
    # is better, since a rejected update would leave the targets unchanged
    return_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.dt < 0:
            raise ValueError("dt must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be at least 1")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.eikonal_weight < 0 or self.weight_decay < 0 or self.grad_tol < 0:
            raise ValueError("regularisation weights and grad_tol must be non-negative")
        if self.mode not in ("eulerian", "advect"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class TargetSet:
    points: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.targets):
            raise ValueError("points and targets must align")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.targets))):
            raise ValueError("target set has non-finite entries")

    def __len__(self):
        return len(self.targets)


def _points(surface) -> np.ndarray:
    return surface.vertices if hasattr(surface, "vertices") else np.atleast_2d(
        np.asarray(surface, dtype=np.float64))


def eulerian_targets(field, surface, velocity, dt: float) -> TargetSet:
    """Level-set values one explicit step ahead: ``Phi - dt * grad(Phi) . V``."""
    x = _points(surface)
    v = np.asarray(velocity, dtype=np.float64)
    if v.shape != x.shape:
        raise ValueError(f"flow shape {v.shape} does not match points {x.shape}")
    phi = field_values(field, x)
    g = field_gradients(field, x)
    return TargetSet(x, phi - dt * np.sum(g * v, axis=1))


def advected_targets(surface, velocity) -> TargetSet:
    """Zero level at the points moved by ``velocity`` (editing objective)."""
    x = _points(surface)
    return TargetSet(x + np.asarray(velocity, dtype=np.float64), np.zeros(len(x)))


def eikonal_samples(points: np.ndarray, count: int, bounds, rng, sigma: float = 0.05) -> np.ndarray:
    """Half near the given surface points, half uniform in the box."""
    if count <= 0:
        return np.zeros((0, points.shape[1]))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    near_n = count // 2
    near = points[rng.integers(0, len(points), size=near_n)]
    near = near + rng.normal(scale=sigma, size=near.shape)
    uni = rng.uniform(lo, hi, size=(count - near_n, len(lo)))
    return np.concatenate([near, uni])


def _objective(params, x, target, eik_x, weight, want_grad=True):
    jet = mlp.Jet(params, x, order=0)
    r = jet.value - target
    data = float(np.mean(r * r))
    eik = 0.0
    grad = jet.backward(2.0 * r / len(x)) if want_grad else None
    if weight > 0 and len(eik_x):
        ejet = mlp.Jet(params, eik_x, order=1)
        gn = np.linalg.norm(ejet.grad, axis=1)
        e = gn - 1.0
        eik = float(np.mean(e * e))
        if want_grad:
            gg = (weight * 2.0 * e / np.maximum(gn, 1e-12) / len(eik_x))[:, None] * ejet.grad
            grad += ejet.backward(None, gg)
    return data, eik, grad


@dataclass
class FitResult:
    params: mlp.MlpParams
    objective: float
    data_term: float
    history: list[float]
    first_gradient: np.ndarray
    initial_objective: float


def fit_targets(params: mlp.MlpParams, targets: TargetSet, config: EvolutionConfig,
                rng=None, optimizer: Adam | None = None, bounds=None) -> FitResult:
    """Adam on ``mean (Phi - target)^2 + w * mean (|grad Phi| - 1)^2``.

    Eikonal points are drawn once per call. The loop ends early when the
    gradient norm drops to ``config.grad_tol``. Unless ``config.return_best``
    is off, the best iterate seen is returned, so the objective never ends
    above its entry value.
    """
    if len(targets) == 0:
        raise ValueError("empty target set")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    bounds = config.grid.bounds if bounds is None else bounds
    opt = optimizer or Adam(lr=config.lr, weight_decay=config.weight_decay)
    eik_x = (eikonal_samples(targets.points, config.eikonal_sample_count, bounds, rng,
                             config.eikonal_sigma)
             if config.eikonal_weight > 0 else np.zeros((0, params.input_dim)))
    w = config.eikonal_weight
    theta = params.theta.copy()
    history = []
    best = (np.inf, theta, 0.0)
    first = None
    full = config.vertex_batch is None or config.vertex_batch >= len(targets)
    j0 = None
    for step in range(config.inner_steps + 1):
        p = params.with_theta(theta)
        if full:
            x, tgt = targets.points, targets.targets
        else:
            idx = rng.choice(len(targets), size=config.vertex_batch, replace=False)
            x, tgt = targets.points[idx], targets.targets[idx]
        last = step == config.inner_steps
        data, eik, grad = _objective(p, x, tgt, eik_x, w, want_grad=not last)
        if not full:
            data = float(np.mean((mlp.evaluate(p, targets.points) - targets.targets) ** 2))
        obj = data + w * eik
        history.append(obj)
        if j0 is None:
            j0 = obj
            first = grad.copy()
        # Adam's first few steps may overshoot a tiny objective; only a
        # non-finite value or a blown-up final iterate counts as divergence
        if not np.isfinite(obj) or (last and obj > max(config.divergence_factor * j0, 1e-12)):
            raise DivergenceError(
                f"fit_targets diverged at inner step {step}: J = {obj:.3e} (entry {j0:.3e})",
                history, params.with_theta(best[1]))
        if obj < best[0]:
            best = (obj, theta, data)
        if last or np.linalg.norm(grad) <= config.grad_tol:
            break
        theta = opt.step(theta, grad)
    if not config.return_best:
        best = (obj, theta, data)
    return FitResult(params.with_theta(best[1]), best[0], best[2], history, first, j0)


def meshsdf_direction(params: mlp.MlpParams, points, velocity) -> np.ndarray:
    """``sum_i (V_i . grad Phi(x_i)) dPhi(x_i)/dtheta``."""
    x = _points(points)
    jet = mlp.Jet(params, x, order=1)
    w = np.sum(jet.grad * np.asarray(velocity, dtype=np.float64), axis=1)
    return mlp.Jet(params, x, order=0).backward(w)


def meshsdf_step(params: mlp.MlpParams, points, velocity, lr: float) -> mlp.MlpParams:
    """One explicit step ``theta - lr * sum (V . grad Phi) dPhi/dtheta``."""
    return params.with_theta(params.theta - lr * meshsdf_direction(params, points, velocity))


@dataclass
class DvrInfo:
    hits: np.ndarray
    points: np.ndarray
    directions: np.ndarray
    weights: np.ndarray
    direction: np.ndarray


def dvr_direction(params: mlp.MlpParams, origins, directions, flow, max_steps: int = 256,
                  hit_eps: float = 1e-7, max_dist: float = 10.0,
                  step_scale: float = 1.0) -> DvrInfo:
    """Parameter direction of the ray-marched update.

    Rays are sphere-traced to the zero set; each hit ``x`` with view
    direction ``v`` contributes ``(V.v)/(grad Phi.v) dPhi(x)/dtheta``.
    ``flow`` maps ``(points, unit normals)`` to velocities.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    hit, pts, _, _ = sphere_trace_batch(params, o, d, max_steps, hit_eps, max_dist, step_scale)
    x = pts[hit]
    v = d[hit]
    if len(x) == 0:
        return DvrInfo(hit, x, v, np.zeros(0), np.zeros(params.size))
    jet = mlp.Jet(params, x, order=1)
    g = jet.grad
    normals = g / np.linalg.norm(g, axis=1, keepdims=True)
    vel = np.asarray(flow(x, normals), dtype=np.float64)
    w = np.sum(vel * v, axis=1) / np.sum(g * v, axis=1)
    return DvrInfo(hit, x, v, w, mlp.Jet(params, x, order=0).backward(w))


def dvr_step(params: mlp.MlpParams, origins, directions, flow, lr: float,
             return_info: bool = False, **trace_kwargs):
    info = dvr_direction(params, origins, directions, flow, **trace_kwargs)
    out = params.with_theta(params.theta - lr * info.direction)
    return (out, info) if return_info else out


def camera_rays(camera):
    """All pixel rays of a renderer camera as ``(origins, directions)``."""
    d = camera.ray_directions()
    return np.broadcast_to(camera.position, d.shape).copy(), d


# ---------------------------------------------------------------------------
# the full loop


@dataclass
class StepRecord:
    t: int
    params: mlp.MlpParams
    mesh: object
    diagnostics: dict


@dataclass
class Trajectory:
    initial_mesh: object
    steps: list[StepRecord]
    stopped: str | None = None

    @property
    def final_params(self):
        return self.steps[-1].params if self.steps else None


def grad_norm_stats(params, points) -> dict:
    if len(points) == 0:
        return {"mean": float("nan"), "min": float("nan"), "max": float("nan"),
                "mean_abs_dev": float("nan")}
    n = np.linalg.norm(field_gradients(params, points), axis=1)
    return {"mean": float(n.mean()), "min": float(n.min()), "max": float(n.max()),
            "mean_abs_dev": float(np.mean(np.abs(n - 1.0)))}


def evolve(params: mlp.MlpParams, flow_provider, config: EvolutionConfig,
           reference_points=None, sink=None, keep_meshes: bool = True,
           callback=None) -> Trajectory:
    """Alternate extraction, flow evaluation and re-fitting for ``horizon`` steps.

    ``flow_provider(surface, t)`` returns per-vertex velocities. ``sink``
    receives one JSON line of diagnostics per step. Stops early, without
    raising, once the zero set leaves the grid.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay) if config.persistent_optimizer else None
    surface = extract(params, config.grid.draw(rng))
    traj = Trajectory(surface, [])
    if surface.is_empty:
        traj.stopped = "empty zero set at start"
        return traj
    for t in range(1, config.horizon + 1):
        velocity = np.asarray(flow_provider(surface, t), dtype=np.float64)
        if config.mode == "eulerian":
            targets = eulerian_targets(params, surface, velocity, config.dt)
        else:
            targets = advected_targets(surface, velocity)
        result = fit_targets(params, targets, config, rng, opt)
        params = result.params
        new_surface = extract(params, config.grid.draw(rng))
        diag = {"t": t, "J_final": result.data_term, "objective": result.objective,
                "vertex_count": int(len(new_surface.vertices)),
                "grad_norm_stats": grad_norm_stats(params, new_surface.vertices)}
        if reference_points is not None and not new_surface.is_empty:
            diag["chamfer_to_ref"] = chamfer(new_surface.vertices, reference_points)
        log.info("step %d J=%.3e vertices=%d", t, result.data_term, diag["vertex_count"])
        if sink is not None:
            sink.write(json.dumps(diag) + "\n")
        rec = StepRecord(t, params, new_surface if keep_meshes else None, diag)
        traj.steps.append(rec)
        if callback is not None:
            callback(rec)
        if new_surface.is_empty:
            traj.stopped = f"zero set vanished after step {t}"
            break
        surface = new_surface
    return traj
