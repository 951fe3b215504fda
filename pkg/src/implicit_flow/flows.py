"""Explicit per-vertex flow fields on extracted surfaces.

Every constructor returns a velocity (the negative energy gradient), never
the raw gradient.
"""

from __future__ import annotations

import numpy as np

from . import renderer
from .mesh import laplacian


class NoViewError(RuntimeError):
    """Raised when no camera sees the surface, so the photometric flow is void."""


def _check(mesh, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != mesh.vertices.shape:
        raise ValueError(f"flow shape {v.shape} does not match mesh {mesh.vertices.shape}")
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("flow field has non-finite entries")
    return v


def constant_normal_flow(mesh, speed: float) -> np.ndarray:
    return _check(mesh, speed * mesh.normals)


def rotation_generator(points: np.ndarray, axis=(0.0, 0.0, 1.0), center=None,
                       rate: float = 1.0) -> np.ndarray:
    """Velocity of a rigid rotation; in 2D the rotation is about ``center``."""
    p = np.asarray(points, dtype=np.float64)
    c = np.zeros(p.shape[1]) if center is None else np.asarray(center, dtype=np.float64)
    q = p - c
    if p.shape[1] == 2:
        return rate * np.stack([-q[:, 1], q[:, 0]], axis=1)
    a = np.asarray(axis, dtype=np.float64)
    return rate * np.cross(a / np.linalg.norm(a), q)


def tangential_flow(mesh, generator=None, **kwargs) -> np.ndarray:
    """Tangent-plane projection of ``generator`` (an array or a callable of
    the vertices); defaults to a rotation."""
    n = mesh.normals
    if generator is None:
        g = rotation_generator(mesh.vertices, **kwargs)
    elif callable(generator):
        g = np.asarray(generator(mesh.vertices), dtype=np.float64)
    else:
        g = np.asarray(generator, dtype=np.float64)
    v = g - n * np.sum(g * n, axis=1, keepdims=True)
    # one more projection kills the rounding left by the first
    v -= n * np.sum(v * n, axis=1, keepdims=True)
    return _check(mesh, v)


def mean_curvature_flow(mesh, rate: float, kind: str = "uniform") -> np.ndarray:
    """``rate * L x``: points each vertex towards its neighbours' average."""
    if rate == 0:
        return np.zeros_like(mesh.vertices)
    return _check(mesh, rate * (laplacian(mesh, kind) @ mesh.vertices))


smoothing_flow = mean_curvature_flow


def photometric_flow(mesh, cameras, targets, smooth_rate: float = 0.0,
                     albedo: float = 1.0, kind: str = "uniform") -> np.ndarray:
    """Negative image-error gradient summed over views plus Laplacian smoothing."""
    if len(cameras) != len(targets):
        raise ValueError("one target image per camera required")
    grad = np.zeros_like(mesh.vertices)
    seen = False
    for cam, target in zip(cameras, targets):
        hits = renderer.cast(mesh, cam)
        if len(hits.pixel) == 0:
            continue
        seen = True
        r = target - renderer.render(mesh, cam, albedo, hits)
        grad += renderer.render_gradients(mesh, cam, r, albedo, hits)
    if not seen:
        raise NoViewError("no camera sees the surface; photometric flow is undefined")
    v = -grad
    if smooth_rate:
        v += smooth_rate * (laplacian(mesh, kind) @ mesh.vertices)
    return _check(mesh, v)
