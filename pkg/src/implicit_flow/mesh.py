"""Lagrangian surfaces (triangle meshes, polylines) and operators on them."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class TriangleMesh:
    """Vertices ``(k, 3)`` and consistently wound faces ``(f, 3)``.

    Face winding follows the right-hand rule with normals pointing to the
    positive side of the level-set function.
    """

    cell_arity = 3

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("face index out of range")
        self._normals = None

    @property
    def dim(self) -> int:
        return 3

    @property
    def cells(self) -> np.ndarray:
        return self.faces

    def __len__(self):
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @property
    def normals(self) -> np.ndarray:
        if self._normals is None:
            self._normals = vertex_normals(self)
        return self._normals

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_cross(self), axis=1)

    def edges(self) -> np.ndarray:
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def flipped(self) -> TriangleMesh:
        # swapping the last two corners keeps both edge vectors, so every
        # face normal is negated exactly
        return TriangleMesh(self.vertices.copy(), self.faces[:, [0, 2, 1]].copy())

    def translated(self, offset) -> TriangleMesh:
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy())

    def with_vertices(self, vertices) -> TriangleMesh:
        return TriangleMesh(vertices, self.faces.copy())

    def cleaned(self, min_area: float = 1e-12) -> TriangleMesh:
        """Drop faces with area below ``min_area`` and unreferenced vertices."""
        if self.is_empty:
            return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        keep = self.face_areas() >= min_area
        faces = self.faces[keep]
        used, inverse = np.unique(faces, return_inverse=True)
        return TriangleMesh(self.vertices[used], inverse.reshape(-1, 3))

    def sample(self, n: int, rng) -> np.ndarray:
        """Area-weighted uniform samples on the surface."""
        area = self.face_areas()
        idx = rng.choice(len(self.faces), size=n, p=area / area.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        t = self.vertices[self.faces[idx]]
        return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
                + (r1 * r2)[:, None] * t[:, 2])


class PolylineSet:
    """2D contour: vertices ``(k, 2)``, directed segments ``(s, 2)`` and the
    chains (closed loops or open curves) they form.

    Segments run counter-clockwise around negative regions, so the
    right-hand perpendicular of each segment points to the positive side.
    """

    cell_arity = 2

    def __init__(self, vertices, segments, chains=None):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        self.segments = np.asarray(segments, dtype=np.int64).reshape(-1, 2)
        if len(self.segments) and (self.segments.min() < 0 or self.segments.max() >= len(self.vertices)):
            raise MeshError("segment index out of range")
        self.chains = chains if chains is not None else _chain(self.segments, len(self.vertices))
        self._normals = None

    @property
    def dim(self) -> int:
        return 2

    @property
    def cells(self) -> np.ndarray:
        return self.segments

    def __len__(self):
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.segments) == 0

    @property
    def normals(self) -> np.ndarray:
        if self._normals is None:
            self._normals = vertex_normals(self)
        return self._normals

    def edges(self) -> np.ndarray:
        return np.unique(np.sort(self.segments, axis=1), axis=0)

    def with_vertices(self, vertices) -> PolylineSet:
        return PolylineSet(vertices, self.segments.copy(), self.chains)

    def flipped(self) -> PolylineSet:
        return PolylineSet(self.vertices.copy(), self.segments[:, ::-1].copy())

    def segment_lengths(self) -> np.ndarray:
        d = self.vertices[self.segments[:, 1]] - self.vertices[self.segments[:, 0]]
        return np.linalg.norm(d, axis=1)


def _chain(segments: np.ndarray, n_vertices: int) -> list[np.ndarray]:
    """Group directed segments into vertex chains (loops repeat no vertex)."""
    nxt = np.full(n_vertices, -1)
    has_prev = np.zeros(n_vertices, dtype=bool)
    nxt[segments[:, 0]] = segments[:, 1]
    has_prev[segments[:, 1]] = True
    seen = np.zeros(n_vertices, dtype=bool)
    chains = []
    starts = [int(v) for v in segments[:, 0] if not has_prev[v]]
    for v0 in starts + [int(v) for v in segments[:, 0]]:
        if seen[v0]:
            continue
        chain = []
        v = v0
        while v != -1 and not seen[v]:
            seen[v] = True
            chain.append(v)
            v = nxt[v]
        chains.append(np.asarray(chain, dtype=np.int64))
    return chains


def _face_cross(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    c = _face_cross(mesh)
    return c / np.linalg.norm(c, axis=1, keepdims=True)


def vertex_normals(mesh) -> np.ndarray:
    """Area-weighted (length-weighted in 2D) average of incident cell normals."""
    v = mesh.vertices
    acc = np.zeros_like(v)
    if isinstance(mesh, PolylineSet):
        s = mesh.segments
        d = v[s[:, 1]] - v[s[:, 0]]
        perp = np.stack([d[:, 1], -d[:, 0]], axis=1)
        np.add.at(acc, s[:, 0], perp)
        np.add.at(acc, s[:, 1], perp)
    else:
        # face-major accumulation: each vertex sums its faces in face order,
        # whatever corner it occupies, so reversing windings negates exactly
        c = _face_cross(mesh)
        np.add.at(acc, mesh.faces.ravel(), np.repeat(c, 3, axis=0))
    norm = np.linalg.norm(acc, axis=1)
    if len(v) and np.any(norm == 0):
        bad = np.flatnonzero(norm == 0)
        raise MeshError(f"{len(bad)} vertices have no incident area (first: {bad[0]})")
    return acc / norm[:, None]


def adjacency(mesh) -> sp.csr_matrix:
    e = mesh.edges()
    k = len(mesh.vertices)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(k, k))


def uniform_laplacian(mesh) -> sp.csr_matrix:
    """``L[i, j] = 1/deg(i)`` for neighbours, ``L[i, i] = -1``."""
    a = adjacency(mesh)
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError(f"{int(np.sum(deg == 0))} isolated vertices")
    return (sp.diags(1.0 / deg) @ a - sp.identity(len(deg))).tocsr()


def cotangent_laplacian(mesh: TriangleMesh) -> sp.csr_matrix:
    """Cotangent weights normalised per row (weighted average minus self)."""
    v = mesh.vertices
    f = mesh.faces
    k = len(v)
    rows, cols, vals = [], [], []
    for i in range(3):
        a, b, c = f[:, i], f[:, (i + 1) % 3], f[:, (i + 2) % 3]
        u = v[b] - v[a]
        w = v[c] - v[a]
        cot = np.einsum("ij,ij->i", u, w) / np.maximum(np.linalg.norm(np.cross(u, w), axis=1), 1e-300)
        rows += [b, c]
        cols += [c, b]
        vals += [0.5 * cot, 0.5 * cot]
    w = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(k, k))
    total = np.asarray(w.sum(axis=1)).ravel()
    if np.any(np.abs(total) < 1e-300):
        raise MeshError("degenerate cotangent row")
    return (sp.diags(1.0 / total) @ w - sp.identity(k)).tocsr()


def laplacian(mesh, kind: str = "uniform") -> sp.csr_matrix:
    if kind == "uniform":
        return uniform_laplacian(mesh)
    if kind == "cotangent":
        if not isinstance(mesh, TriangleMesh):
            raise MeshError("cotangent weights need a triangle mesh")
        return cotangent_laplacian(mesh)
    raise ValueError(f"unknown Laplacian kind {kind!r}")


# --------------------------------------------------------------------------
# thin-shell deformation


def _normalize_constraints(k, handles, frozen, dim):
    idx = []
    val = []
    if handles:
        if isinstance(handles, dict):
            items = sorted(handles.items())
            idx += [int(i) for i, _ in items]
            val += [np.asarray(d, dtype=np.float64) for _, d in items]
        else:
            hi, hd = handles
            idx += [int(i) for i in hi]
            val += list(np.asarray(hd, dtype=np.float64).reshape(len(hi), dim))
    if frozen is not None:
        fz = sorted(int(i) for i in frozen)
        idx += fz
        val += [np.zeros(dim)] * len(fz)
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) == 0:
        raise SolverError("thin-shell system needs at least one handle or frozen vertex")
    if idx.min() < 0 or idx.max() >= k:
        raise MeshError("constraint index out of range")
    uniq, first = np.unique(idx, return_index=True)
    if len(uniq) != len(idx):
        raise MeshError("a vertex is constrained twice")
    return idx, np.asarray(val).reshape(len(idx), dim)


def thin_shell_operator(mesh, k_stretch: float, k_bend: float, kind: str = "uniform"):
    lap = laplacian(mesh, kind)
    return (-k_stretch * lap + k_bend * (lap @ lap)).tocsr()


def solve_thin_shell(mesh, handles, frozen=None, k_stretch: float = 1.0,
                     k_bend: float = 1.0, method: str = "direct", tol: float = 1e-10,
                     max_iter: int = 10_000, residual_tol: float = 1e-8,
                     kind: str = "uniform", return_residual: bool = False):
    """Densify sparse displacements with ``-kS L V + kB L^2 V = 0``.

    ``handles`` maps vertex -> displacement (dict, or ``(indices, vectors)``);
    ``frozen`` vertices get zero displacement. Constrained rows are replaced
    by equalities; the remaining block is solved per coordinate.
    """
    if k_stretch < 0 or k_bend < 0 or (k_stretch == 0 and k_bend == 0):
        raise ValueError("need k_stretch, k_bend >= 0 and not both zero")
    k = len(mesh.vertices)
    dim = mesh.dim
    cidx, cval = _normalize_constraints(k, handles, frozen, dim)
    a = thin_shell_operator(mesh, k_stretch, k_bend, kind)
    free = np.ones(k, dtype=bool)
    free[cidx] = False
    fidx = np.flatnonzero(free)
    out = np.zeros((k, dim))
    out[cidx] = cval
    if len(fidx) == 0:
        return (out, 0.0) if return_residual else out
    a_ff = a[fidx][:, fidx].tocsc()
    rhs = -(a[fidx][:, cidx] @ cval)
    if method == "direct":
        try:
            lu = splu(a_ff)
        except RuntimeError as exc:
            raise SolverError(f"singular thin-shell system: {exc}") from exc
        sol = lu.solve(rhs)
    elif method == "cg":
        sol = np.column_stack([_cgnr(a_ff, rhs[:, j], tol, max_iter) for j in range(dim)])
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(sol)):
        raise SolverError("thin-shell solve produced non-finite values")
    res = np.linalg.norm(a_ff @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if np.linalg.norm(rhs) == 0:
        res = np.linalg.norm(a_ff @ sol)
    if res > residual_tol:
        raise SolverError(f"thin-shell residual {res:.3e} exceeds {residual_tol:.1e}")
    out[fidx] = sol
    return (out, float(res)) if return_residual else out


def _cgnr(a, b, tol, max_iter):
    """Jacobi-preconditioned CG on ``A^T A x = A^T b``."""
    at = a.T.tocsr()
    rhs = at @ b
    diag = np.asarray(a.multiply(a).sum(axis=0)).ravel()
    minv = 1.0 / np.where(diag > 0, diag, 1.0)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = minv * r
    p = z.copy()
    rz = r @ z
    bnorm = max(np.linalg.norm(rhs), 1e-300)
    for _ in range(max_iter):
        if np.linalg.norm(r) / bnorm < tol:
            return x
        ap = at @ (a @ p)
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {max_iter} iterations "
                      f"(relative residual {np.linalg.norm(r) / bnorm:.3e})")


# --------------------------------------------------------------------------
# metrics


def chamfer(a, b) -> float:
    """Average of the two directed mean squared nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(da ** 2)) + float(np.mean(db ** 2)))


def chamfer_bruteforce(a, b, chunk: int = 1024) -> float:
    """O(mn) reference for :func:`chamfer`, evaluated in row blocks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = np.empty(len(a))
    db = np.full(len(b), np.inf)
    for i in range(0, len(a), chunk):
        d2 = ((a[i:i + chunk, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        da[i:i + chunk] = d2.min(axis=1)
        np.minimum(db, d2.min(axis=0), out=db)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def closest_on_segments(p, a, b, chunk=2048):
    """Closest point on any of the segments ``a[s]-b[s]`` for each row of ``p``."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    ab = b - a
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    out = np.empty_like(p)
    for i in range(0, len(p), chunk):
        q = p[i:i + chunk]
        t = np.clip(np.einsum("nsj,sj->ns", q[:, None, :] - a[None], ab) / denom, 0.0, 1.0)
        c = a[None] + t[..., None] * ab[None]
        k = ((q[:, None, :] - c) ** 2).sum(axis=2).argmin(axis=1)
        out[i:i + chunk] = c[np.arange(len(q)), k]
    return out


def _points_to_segments(p, a, b):
    return np.linalg.norm(closest_on_segments(p, a, b) - p, axis=1)


def signed_offsets(points, normals, polyline: PolylineSet) -> np.ndarray:
    """Distance from each point to ``polyline``, signed by its normal."""
    s = polyline.segments
    c = closest_on_segments(points, polyline.vertices[s[:, 0]], polyline.vertices[s[:, 1]])
    d = c - points
    return np.linalg.norm(d, axis=1) * np.sign(np.sum(d * normals, axis=1))


def directed_hausdorff(a, b) -> float:
    """max over points of ``a`` of the distance to ``b`` (segments if ``b`` is a
    polyline set, points otherwise)."""
    pa = a.vertices if isinstance(a, PolylineSet) else np.asarray(a, dtype=np.float64)
    if isinstance(b, PolylineSet):
        if b.is_empty:
            return float("inf")
        d = _points_to_segments(pa, b.vertices[b.segments[:, 0]], b.vertices[b.segments[:, 1]])
    else:
        d, _ = cKDTree(np.asarray(b, dtype=np.float64)).query(pa)
    return float(d.max()) if len(d) else 0.0


def hausdorff(a, b) -> float:
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def connected_components(mesh) -> list[np.ndarray]:
    """Vertex index arrays of the connected components."""
    from scipy.sparse.csgraph import connected_components as cc
    n, labels = cc(adjacency(mesh), directed=False)
    return [np.flatnonzero(labels == i) for i in range(n)]


def euler_characteristic(mesh: TriangleMesh) -> int:
    return len(mesh.vertices) - len(mesh.edges()) + len(mesh.faces)


def component_genus(mesh: TriangleMesh) -> list[int]:
    """Genus of each closed component, largest component first."""
    out = []
    comps = sorted(connected_components(mesh), key=len, reverse=True)
    for comp in comps:
        sub = submesh(mesh, comp)
        out.append((2 - euler_characteristic(sub)) // 2)
    return out


def submesh(mesh: TriangleMesh, vertex_ids) -> TriangleMesh:
    keep = np.zeros(len(mesh.vertices), dtype=bool)
    keep[vertex_ids] = True
    faces = mesh.faces[keep[mesh.faces].all(axis=1)]
    remap = -np.ones(len(mesh.vertices), dtype=np.int64)
    remap[np.flatnonzero(keep)] = np.arange(keep.sum())
    return TriangleMesh(mesh.vertices[keep], remap[faces])


def vertex_areas(mesh: TriangleMesh) -> np.ndarray:
    """One third of the incident face area per vertex."""
    w = np.zeros(len(mesh.vertices))
    a = mesh.face_areas() / 3.0
    for k in range(3):
        np.add.at(w, mesh.faces[:, k], a)
    return w


def sphericity(surface) -> float:
    """min/max eigenvalue ratio of the vertex covariance (1 for a sphere).

    For a triangle mesh the vertices are weighted by their share of the
    surface area, which removes the bias of uneven vertex density; plain
    point arrays are weighted equally.
    """
    if isinstance(surface, TriangleMesh):
        pts, w = surface.vertices, vertex_areas(surface)
    else:
        pts, w = np.asarray(surface, dtype=np.float64), None
    if len(pts) < 4:
        raise ValueError("sphericity needs at least four points")
    ev = np.linalg.eigvalsh(np.cov(pts.T, aweights=w))
    return float(ev[0] / ev[-1])
