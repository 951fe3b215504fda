"""Ray-cast diffuse renderer with a light at the camera, plus its vertex
gradients for photometric flows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh, vertex_normals

EPS = 1e-9


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if not 0 < self.fov < np.pi:
            raise ValueError("vertical field of view must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera cannot look at its own position")
        if np.linalg.norm(np.cross(self.forward, self.up)) < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")

    @property
    def forward(self) -> np.ndarray:
        f = self.look_at - self.position
        return f / np.linalg.norm(f)

    def basis(self):
        f = self.forward
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        return r, np.cross(r, f), f

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def ray_directions(self) -> np.ndarray:
        """Unit directions, row-major from the top-left pixel, ``(h*w, 3)``."""
        r, u, f = self.basis()
        half = np.tan(0.5 * self.fov)
        aspect = self.width / self.height
        col = (np.arange(self.width) + 0.5) / self.width * 2 - 1
        row = 1 - (np.arange(self.height) + 0.5) / self.height * 2
        sx, sy = np.meshgrid(col * half * aspect, row * half)
        d = f + sx.reshape(-1, 1) * r + sy.reshape(-1, 1) * u
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def project(self, points: np.ndarray):
        """Continuous pixel coordinates ``(col, row)`` and camera depth."""
        r, u, f = self.basis()
        q = points - self.position
        z = q @ f
        half = np.tan(0.5 * self.fov)
        aspect = self.width / self.height
        with np.errstate(divide="ignore", invalid="ignore"):
            sx = (q @ r) / z / (half * aspect)
            sy = (q @ u) / z / half
        col = (sx + 1) * 0.5 * self.width
        row = (1 - sy) * 0.5 * self.height
        return col, row, z

    def translated(self, offset) -> Camera:
        o = np.asarray(offset, dtype=np.float64)
        return Camera(self.position + o, self.look_at + o, self.up, self.fov, self.width, self.height)


def orbit_cameras(n: int, radius: float, size: int, fov: float = np.radians(40.0),
                  seed: int = 0, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """``n`` cameras spread over a sphere (Fibonacci lattice, random spin)."""
    rng = np.random.default_rng(seed)
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = np.pi * (1 + 5 ** 0.5) * k + rng.uniform(0, 2 * np.pi)
    s = np.sqrt(1 - z * z)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for p in np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1):
        up = np.array([0.0, 0.0, 1.0]) if abs(p[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        cams.append(Camera(target + radius * p, target, up, fov, size, size))
    return cams


@dataclass
class Hits:
    """Per-pixel nearest intersection (only pixels that hit are stored)."""

    pixel: np.ndarray
    face: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t: np.ndarray


def _candidate_pairs(mesh: TriangleMesh, camera: Camera):
    h, w = camera.shape
    tri = mesh.vertices[mesh.faces]
    col, row, z = camera.project(tri.reshape(-1, 3))
    col = col.reshape(-1, 3)
    row = row.reshape(-1, 3)
    z = z.reshape(-1, 3)
    front = np.all(z > EPS, axis=1)
    c0 = np.where(front, np.floor(col.min(axis=1)) - 1, 0)
    c1 = np.where(front, np.floor(col.max(axis=1)) + 1, w - 1)
    r0 = np.where(front, np.floor(row.min(axis=1)) - 1, 0)
    r1 = np.where(front, np.floor(row.max(axis=1)) + 1, h - 1)
    c0 = np.clip(c0, 0, w - 1).astype(np.int64)
    c1 = np.clip(c1, -1, w - 1).astype(np.int64)
    r0 = np.clip(r0, 0, h - 1).astype(np.int64)
    r1 = np.clip(r1, -1, h - 1).astype(np.int64)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    count = nc * nr
    face = np.repeat(np.arange(len(tri)), count)
    if len(face) == 0:
        return face, face
    offset = np.arange(len(face)) - np.repeat(np.cumsum(count) - count, count)
    ncf = nc[face]
    pix = (r0[face] + offset // ncf) * w + c0[face] + offset % ncf
    return pix, face


def _intersect(orig, d, p0, p1, p2):
    """Moller-Trumbore; returns (u, v, t, valid)."""
    e1 = p1 - p0
    e2 = p2 - p0
    pv = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    ok = np.abs(det) > EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = orig - p0
    u = np.einsum("ij,ij->i", tv, pv) * inv
    qv = np.cross(tv, e1)
    v = np.einsum("ij,ij->i", d, qv) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    ok &= (u >= 0) & (v >= 0) & (u + v <= 1) & (t > EPS)
    return u, v, t, ok


def cast(mesh: TriangleMesh, camera: Camera) -> Hits:
    empty = np.zeros(0, dtype=np.int64)
    if mesh.is_empty:
        return Hits(empty, empty, np.zeros(0), np.zeros(0), np.zeros(0))
    dirs = camera.ray_directions()
    pix, face = _candidate_pairs(mesh, camera)
    f = mesh.faces[face]
    v = mesh.vertices
    u, w, t, ok = _intersect(camera.position, dirs[pix], v[f[:, 0]], v[f[:, 1]], v[f[:, 2]])
    pix, face, u, w, t = pix[ok], face[ok], u[ok], w[ok], t[ok]
    order = np.lexsort((face, t, pix))
    pix, face, u, w, t = pix[order], face[order], u[order], w[order], t[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    return Hits(pix[first], face[first], u[first], w[first], t[first])


def reintersect(mesh: TriangleMesh, camera: Camera, hits: Hits) -> Hits:
    """Recompute hit coordinates keeping each pixel on its triangle."""
    f = mesh.faces[hits.face]
    v = mesh.vertices
    d = camera.ray_directions()[hits.pixel]
    u, w, t, _ = _intersect(camera.position, d, v[f[:, 0]], v[f[:, 1]], v[f[:, 2]])
    return Hits(hits.pixel, hits.face, u, w, t)


def _shade(mesh, camera, hits, normals):
    dirs = camera.ray_directions()[hits.pixel]
    f = mesh.faces[hits.face]
    b = np.stack([1 - hits.u - hits.v, hits.u, hits.v], axis=1)
    nt = np.einsum("nk,nkj->nj", b, normals[f])
    nlen = np.linalg.norm(nt, axis=1)
    m = nt / np.maximum(nlen, 1e-300)[:, None]
    cos = -np.einsum("ij,ij->i", m, dirs)
    return dirs, f, b, nt, nlen, m, cos


def render(mesh: TriangleMesh, camera: Camera, albedo: float = 1.0, hits: Hits | None = None) -> np.ndarray:
    """Grayscale image ``(h, w)``; background is 0."""
    if not 0 < albedo <= 1:
        raise ValueError("albedo must lie in (0, 1]")
    img = np.zeros(camera.height * camera.width)
    if mesh.is_empty:
        return img.reshape(camera.shape)
    hits = cast(mesh, camera) if hits is None else hits
    if len(hits.pixel):
        cos = _shade(mesh, camera, hits, vertex_normals(mesh))[-1]
        img[hits.pixel] = albedo * np.maximum(cos, 0.0)
    return img.reshape(camera.shape)


def render_gradients(mesh: TriangleMesh, camera: Camera, residual: np.ndarray,
                     albedo: float = 1.0, hits: Hits | None = None) -> np.ndarray:
    """dE/dx for ``E = sum (I - R)^2`` given ``residual = I - R``.

    Visibility is held fixed; derivatives pass through the barycentric
    coordinates of each hit and through the smoothed vertex normals.
    """
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != camera.shape:
        raise ValueError(f"residual shape {residual.shape} does not match camera {camera.shape}")
    grad = np.zeros_like(mesh.vertices)
    if mesh.is_empty:
        return grad
    hits = cast(mesh, camera) if hits is None else hits
    if len(hits.pixel) == 0:
        return grad
    normals = vertex_normals(mesh)
    dirs, f, b, nt, nlen, m, cos = _shade(mesh, camera, hits, normals)
    lit = cos > 0
    g_r = np.where(lit, -2.0 * residual.reshape(-1)[hits.pixel] * albedo, 0.0)
    # d(max(0, m.w))/d(nt) with w = -d
    w = -dirs
    g_nt = g_r[:, None] * (w - m * cos[:, None]) / np.maximum(nlen, 1e-300)[:, None]

    # barycentric pathway
    g_b = np.einsum("nj,nkj->nk", g_nt, normals[f])
    g_uv = np.stack([g_b[:, 1] - g_b[:, 0], g_b[:, 2] - g_b[:, 0], np.zeros(len(g_b))], axis=1)
    p = mesh.vertices[f]
    mat = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], -dirs], axis=2)
    sol = np.linalg.solve(np.transpose(mat, (0, 2, 1)), g_uv[..., None])[..., 0]
    for k in range(3):
        np.add.at(grad, f[:, k], -b[:, k, None] * sol)

    # normal pathway: through each normalised, area-weighted vertex normal
    g_n = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(g_n, f[:, k], b[:, k, None] * g_nt)
    faces = mesh.faces
    vv = mesh.vertices
    e1 = vv[faces[:, 1]] - vv[faces[:, 0]]
    e2 = vv[faces[:, 2]] - vv[faces[:, 0]]
    acc = np.zeros_like(vv)
    c = np.cross(e1, e2)
    for k in range(3):
        np.add.at(acc, faces[:, k], c)
    alen = np.linalg.norm(acc, axis=1)
    g_a = (g_n - normals * np.einsum("ij,ij->i", g_n, normals)[:, None]) / alen[:, None]
    g_c = g_a[faces].sum(axis=1)
    g_e1 = np.cross(e2, g_c)
    g_e2 = np.cross(g_c, e1)
    np.add.at(grad, faces[:, 1], g_e1)
    np.add.at(grad, faces[:, 2], g_e2)
    np.add.at(grad, faces[:, 0], -g_e1 - g_e2)
    return grad


def photometric_energy(mesh: TriangleMesh, camera: Camera, target: np.ndarray,
                       albedo: float = 1.0, hits: Hits | None = None) -> float:
    """Squared image error; a given ``hits`` fixes visibility only."""
    if hits is not None:
        hits = reintersect(mesh, camera, hits)
    r = target - render(mesh, camera, albedo, hits)
    return float(np.sum(r * r))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have the same shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return 99.0
    return float(min(99.0, 10.0 * np.log10(peak * peak / mse)))
