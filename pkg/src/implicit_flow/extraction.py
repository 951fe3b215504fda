"""Zero-set extraction: marching cubes, marching squares and sphere tracing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .fields import field_values
from .mesh import PolylineSet, TriangleMesh


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular sampling grid; ``resolution`` counts nodes per axis.

    ``jitter`` > 0 makes :meth:`draw` pick a resolution uniformly in
    ``[R - jitter, R + jitter]`` each time it is called.
    """

    resolution: tuple[int, ...]
    bounds: tuple[tuple[float, float], ...]
    jitter: int = 0

    def __post_init__(self):
        res = self.resolution
        if np.isscalar(res):
            raise TypeError("use GridSpec.cube for a scalar resolution")
        res = tuple(int(r) for r in res)
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(res) != len(bounds):
            raise ValueError("one (min, max) pair per axis required")
        if any(r < 2 for r in res):
            raise ValueError("resolution must be at least 2 per axis")
        if any(not lo < hi for lo, hi in bounds):
            raise ValueError("bounds need min < max on every axis")
        if self.jitter < 0 or any(r - self.jitter < 2 for r in res):
            raise ValueError("jitter must be non-negative and keep resolution >= 2")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def cube(cls, resolution: int, dim: int = 3, bounds=(-1.0, 1.0), jitter: int = 0) -> GridSpec:
        return cls((resolution,) * dim, (tuple(bounds),) * dim, jitter)

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def cell_size(self) -> np.ndarray:
        return np.array([(hi - lo) / (r - 1) for (lo, hi), r in zip(self.bounds, self.resolution)])

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.cell_size))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, r) for (lo, hi), r in zip(self.bounds, self.resolution)]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def draw(self, rng) -> GridSpec:
        """The grid to use for one time step (jittered if enabled)."""
        if not self.jitter:
            return self
        r = int(rng.integers(-self.jitter, self.jitter + 1))
        return GridSpec(tuple(n + r for n in self.resolution), self.bounds, 0)


def sample_grid(field, grid: GridSpec) -> np.ndarray:
    values = field_values(field, grid.nodes()).reshape(grid.resolution)
    if np.isnan(values).any():
        raise ExtractionError("level-set function is NaN on the grid")
    if not np.isfinite(values).all():
        raise ExtractionError("level-set function is infinite on the grid")
    return values


def extract(field, grid: GridSpec):
    """Marching squares or cubes depending on the grid dimension."""
    if grid.dim == 2:
        return marching_squares(field, grid)
    if grid.dim == 3:
        return marching_cubes(field, grid)
    raise ValueError("only 2D and 3D grids are supported")


def _empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_cubes(field, grid: GridSpec, values: np.ndarray | None = None) -> TriangleMesh:
    """Triangle mesh of the zero set; faces wound so normals follow +grad."""
    if grid.dim != 3:
        raise ValueError("marching cubes needs a 3D grid")
    if values is None:
        values = sample_grid(field, grid)
    vmin, vmax = values.min(), values.max()
    if vmin > 0 or vmax < 0 or vmin == vmax:
        return _empty_mesh()
    # 'descent' winding gives outward normals for negative-inside functions
    verts, faces, _, _ = measure.marching_cubes(
        values, level=0.0, spacing=tuple(grid.cell_size), gradient_direction="descent",
        method="lewiner", allow_degenerate=True)
    verts = verts.astype(np.float64) + np.array([lo for lo, _ in grid.bounds])
    return TriangleMesh(verts, faces).cleaned(1e-12)


# ---------------------------------------------------------------------------
# marching squares
#
# Cell corners in counter-clockwise order: c0=(i,j) c1=(i+1,j) c2=(i+1,j+1)
# c3=(i,j+1); edge k joins corner k and corner k+1. A segment starts where the
# boundary walk leaves the negative region and ends at the next crossing, or
# at the previous one for saddle cells whose centre is positive.


def _segment_table():
    table = {}
    for case in range(16):
        inside = [(case >> k) & 1 for k in range(4)]
        cross = [k for k in range(4) if inside[k] != inside[(k + 1) % 4]]
        for center_inside in (False, True):
            segs = []
            for pos, k in enumerate(cross):
                if inside[k] and not inside[(k + 1) % 4]:
                    step = 1 if (center_inside or len(cross) == 2) else -1
                    segs.append((k, cross[(pos + step) % len(cross)]))
            table[case, center_inside] = segs
    return table


_SEGMENTS = _segment_table()


def marching_squares(field, grid: GridSpec, values: np.ndarray | None = None) -> PolylineSet:
    """Polylines of the zero set, counter-clockwise around negative regions."""
    if grid.dim != 2:
        raise ValueError("marching squares needs a 2D grid")
    if values is None:
        values = sample_grid(field, grid)
    nx, ny = values.shape
    xs, ys = grid.axes()

    # one interpolated point per grid edge (only crossing edges are used)
    def crossing(va, vb):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = va / (va - vb)
        return np.clip(np.nan_to_num(t), 0.0, 1.0)

    th = crossing(values[:-1, :], values[1:, :])          # (nx-1, ny)
    tv = crossing(values[:, :-1], values[:, 1:])          # (nx, ny-1)
    hx = xs[:-1, None] + th * np.diff(xs)[:, None]
    hpts = np.stack([hx, np.broadcast_to(ys[None, :], hx.shape)], axis=-1).reshape(-1, 2)
    vy = ys[None, :-1] + tv * np.diff(ys)[None, :]
    vpts = np.stack([np.broadcast_to(xs[:, None], vy.shape), vy], axis=-1).reshape(-1, 2)
    points = np.concatenate([hpts, vpts])
    n_h = (nx - 1) * ny

    ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    ci = ci.ravel()
    cj = cj.ravel()
    edge_id = np.stack([
        ci * ny + cj,                       # bottom
        n_h + (ci + 1) * (ny - 1) + cj,     # right
        ci * ny + cj + 1,                   # top
        n_h + ci * (ny - 1) + cj,           # left
    ], axis=1)
    corner = np.stack([values[ci, cj], values[ci + 1, cj],
                       values[ci + 1, cj + 1], values[ci, cj + 1]], axis=1)
    inside = corner < 0
    case = (inside * (1 << np.arange(4))).sum(axis=1)
    center_inside = corner.mean(axis=1) < 0

    starts, ends = [], []
    for (c, cin), segs in _SEGMENTS.items():
        if not segs:
            continue
        sel = np.flatnonzero((case == c) & (center_inside == cin))
        for a, b in segs:
            starts.append(edge_id[sel, a])
            ends.append(edge_id[sel, b])
    if not starts:
        return PolylineSet(np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64), [])
    seg = np.stack([np.concatenate(starts), np.concatenate(ends)], axis=1)
    if len(seg) == 0:
        return PolylineSet(np.zeros((0, 2)), np.zeros((0, 2), dtype=np.int64), [])
    # deterministic order: by cell, then by edge
    seg = seg[np.lexsort((seg[:, 1], seg[:, 0]))]
    used, inv = np.unique(seg, return_inverse=True)
    verts = points[used]
    seg = inv.reshape(-1, 2)
    # crossings that land exactly on a grid node coincide; merge them
    verts, inv = np.unique(verts, axis=0, return_inverse=True)
    seg = inv.reshape(-1)[seg]
    seg = seg[seg[:, 0] != seg[:, 1]]
    seg = np.unique(seg, axis=0)
    return PolylineSet(verts, seg)


# ---------------------------------------------------------------------------
# sphere tracing


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(-1)
        d = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        if o.shape != d.shape:
            raise ValueError("origin and direction must have the same dimension")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def sphere_trace_batch(field, origins, directions, max_steps: int = 128,
                       hit_eps: float = 1e-6, max_dist: float = 10.0,
                       step_scale: float = 1.0):
    """March many rays at once.

    Returns ``(hit, points, t, steps)``; ``points`` and ``t`` are only
    meaningful where ``hit`` is true.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(o)
    t = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(max_steps + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        phi = field_values(field, o[idx] + t[idx, None] * d[idx])
        bad = ~np.isfinite(phi)
        done = np.abs(phi) < hit_eps
        hit[idx[done & ~bad]] = True
        active[idx[done | bad]] = False
        move = idx[~done & ~bad]
        t[move] += step_scale * phi[~done & ~bad]
        steps[move] += 1
        active[move[(t[move] > max_dist) | (t[move] < -max_dist) | (steps[move] >= max_steps)]] = False
    # rays still active after the budget are misses
    points = o + t[:, None] * d
    return hit, points, t, steps


def sphere_trace(field, ray: Ray, max_steps: int = 128, hit_eps: float = 1e-6,
                 max_dist: float = 10.0, step_scale: float = 1.0):
    """``(hit point, steps)`` or ``None`` on a miss."""
    hit, pts, _, steps = sphere_trace_batch(field, ray.origin[None], ray.direction[None],
                                            max_steps, hit_eps, max_dist, step_scale)
    if not hit[0]:
        return None
    return pts[0], int(steps[0])
