"""Sine-activated MLP level-set functions with hand-written differentiation.

The network maps ``x -> Phi(x; theta)`` with ``depth`` linear layers. Every
layer but the last is followed by ``sin(omega0 * .)``; the last is linear.

All passes are batched over points and run in float64. Derivatives with
respect to the input are propagated forward as tangents (one per axis, so
``d`` extra channels); parameter gradients of any scalar loss built from
``Phi`` and ``grad_x Phi`` are obtained by a reverse pass over that jet.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"NILS"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights and biases of a sine MLP, stored as one flat vector.

    The flat layout is layer-major; inside a layer the weight matrix comes
    first (row-major) followed by the bias. ``layers`` exposes views.
    """

    theta: np.ndarray
    shapes: tuple[tuple[int, int], ...]
    omega0: float = 30.0
    _offsets: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "theta", theta)
        shapes = tuple((int(r), int(c)) for r, c in self.shapes)
        object.__setattr__(self, "shapes", shapes)
        if not shapes:
            raise ValueError("MLP needs at least one layer")
        for (r, c) in shapes:
            if r < 1 or c < 1:
                raise ValueError(f"bad layer shape {(r, c)}")
        for (r0, _), (_, c1) in zip(shapes[:-1], shapes[1:]):
            if r0 != c1:
                raise ValueError("layer dimensions do not chain")
        if shapes[-1][0] != 1:
            raise ValueError("output dimension must be 1")
        offsets = [0]
        for r, c in shapes:
            offsets.append(offsets[-1] + r * c + r)
        if theta.shape != (offsets[-1],):
            raise ValueError(
                f"theta has {theta.size} entries, layout needs {offsets[-1]}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "_offsets", tuple(offsets))

    @property
    def input_dim(self) -> int:
        return self.shapes[0][1]

    @property
    def output_dim(self) -> int:
        return 1

    @property
    def first_layer_frequency(self) -> float:
        return self.omega0

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for (r, c), o in zip(self.shapes, self._offsets):
            w = self.theta[o:o + r * c].reshape(r, c)
            b = self.theta[o + r * c:o + r * c + r]
            out.append((w, b))
        return out

    def with_theta(self, theta: np.ndarray) -> MlpParams:
        return MlpParams(np.array(theta, dtype=np.float64), self.shapes, self.omega0)

    def copy(self) -> MlpParams:
        return self.with_theta(self.theta.copy())

    def final_bias_index(self) -> int:
        return self.size - 1

    @classmethod
    def from_layers(cls, layers, omega0: float = 30.0) -> MlpParams:
        shapes = []
        chunks = []
        for w, b in layers:
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError("each layer is (weight[out, in], bias[out])")
            shapes.append(w.shape)
            chunks.extend([w.ravel(), b])
        return cls(np.concatenate(chunks), tuple(shapes), float(omega0))


def init_siren(input_dim: int, hidden_width: int, depth: int,
               omega0: float = 30.0, seed: int = 0) -> MlpParams:
    """SIREN initialisation; ``depth`` counts linear layers (>= 2)."""
    if input_dim < 1 or hidden_width < 1:
        raise ValueError("dimensions must be positive")
    if depth < 2:
        raise ValueError("depth must be at least 2")
    rng = np.random.default_rng(seed)
    dims = [input_dim] + [hidden_width] * (depth - 1) + [1]
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == 0:
            bound = 1.0 / n_in
        else:
            bound = np.sqrt(6.0 / n_in) / omega0
        w = rng.uniform(-bound, bound, size=(n_out, n_in))
        b = rng.uniform(-1.0 / np.sqrt(n_in), 1.0 / np.sqrt(n_in), size=n_out)
        layers.append((w, b))
    return MlpParams.from_layers(layers, omega0)


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(
            f"expected points with {params.input_dim} coordinates, got shape {x.shape}"
        )
    return x, single


class Jet:
    """Cached forward pass: values, input tangents and (optionally) second
    derivatives along each axis. Keeps what the reverse pass needs."""

    def __init__(self, params: MlpParams, x: np.ndarray, order: int = 0):
        self.params = params
        self.order = order
        self.x = x
        n, d = x.shape
        om = params.omega0
        layers = params.layers
        h = x
        t = None
        s2 = None
        if order >= 1:
            t = np.zeros((d, n, d))
            for k in range(d):
                t[k, :, k] = 1.0
        if order >= 2:
            s2 = np.zeros((d, n, d))
        self.cache = []
        for w, b in layers[:-1]:
            a = h @ (om * w).T
            a += om * b
            s = np.sin(a)
            c = np.cos(a)
            entry = {"h": h, "s": s, "c": c, "t": t}
            if order >= 1:
                u = t @ w.T
                entry["u"] = u
                t_next = u * c
                t_next *= om
                if order >= 2:
                    q = s2 @ w.T
                    s2 = om * c * q - (om * om) * s * u * u
                t = t_next
            self.cache.append(entry)
            h = s
        w, b = layers[-1]
        self.h_last = h
        self.t_last = t
        self.value = (h @ w[0]) + b[0]
        self.grad = None
        self.lap = None
        if order >= 1:
            self.grad = (t @ w[0]).T.copy()
        if order >= 2:
            self.lap = (s2 @ w[0]).sum(axis=0)

    def backward(self, g_value: np.ndarray | None = None,
                 g_grad: np.ndarray | None = None) -> np.ndarray:
        """Flat gradient of ``sum(g_value * Phi) + sum(g_grad * grad_x Phi)``."""
        params = self.params
        layers = params.layers
        om = params.omega0
        n = self.x.shape[0]
        d = params.input_dim
        use_t = g_grad is not None
        if use_t and self.order < 1:
            raise ValueError("jet was built without input tangents")
        gv = np.zeros(n) if g_value is None else np.asarray(g_value, dtype=np.float64)
        out = np.empty(params.size)
        offs = params._offsets

        w, b = layers[-1]
        gw = gv @ self.h_last
        if use_t:
            gg = np.asarray(g_grad, dtype=np.float64)
            tl = self.t_last
            gw = gw + gg.T.reshape(-1) @ tl.reshape(-1, tl.shape[2])
        o = offs[-2]
        out[o:o + w.size] = gw
        out[o + w.size] = gv.sum()
        gh = gv[:, None] * w[0][None, :]
        gt = gg.T[:, :, None] * w[0][None, None, :] if use_t else None

        for li in range(len(layers) - 2, -1, -1):
            w, b = layers[li]
            e = self.cache[li]
            s, c = e["s"], e["c"]
            if use_t:
                gu = gt * c
                gu *= om
                gc = (gt * e["u"]).sum(axis=0)
                gz = c * gh
                gz -= s * gc * om
                gz *= om
                tk = e["t"]
                gw = gz.T @ e["h"] + gu.reshape(-1, gu.shape[2]).T @ tk.reshape(-1, tk.shape[2])
            else:
                gz = om * c * gh
                gw = gz.T @ e["h"]
            o = offs[li]
            out[o:o + w.size] = gw.ravel()
            out[o + w.size:o + w.size + w.shape[0]] = gz.sum(axis=0)
            if li > 0:
                gh = gz @ w
                if use_t:
                    gt = gu @ w
        return out

    def param_jacobian(self) -> np.ndarray:
        """Per-point ``dPhi/dtheta`` as an ``(n, P)`` matrix."""
        params = self.params
        layers = params.layers
        om = params.omega0
        n = self.x.shape[0]
        jac = np.empty((n, params.size))
        offs = params._offsets
        w, _ = layers[-1]
        o = offs[-2]
        jac[:, o:o + w.size] = self.h_last
        jac[:, o + w.size] = 1.0
        gh = np.broadcast_to(w[0], (n, w.shape[1]))
        for li in range(len(layers) - 2, -1, -1):
            w, _ = layers[li]
            e = self.cache[li]
            gz = om * e["c"] * gh
            o = offs[li]
            m, k = w.shape
            jac[:, o:o + m * k] = (gz[:, :, None] * e["h"][:, None, :]).reshape(n, m * k)
            jac[:, o + m * k:o + m * k + m] = gz
            if li > 0:
                gh = gz @ w
        return jac


def forward(params: MlpParams, x) -> np.ndarray | float:
    """Phi(x; theta). ``x`` is one point ``(d,)`` or a batch ``(n, d)``."""
    xb, single = _as_batch(params, x)
    v = evaluate(params, xb)
    return float(v[0]) if single else v


def evaluate(params: MlpParams, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Value-only batched evaluation, chunked to bound memory."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape[0])
    layers = params.layers
    om = params.omega0
    for i in range(0, x.shape[0], chunk):
        h = x[i:i + chunk]
        for w, b in layers[:-1]:
            h = np.sin(om * (h @ w.T + b))
        w, b = layers[-1]
        out[i:i + chunk] = h @ w[0] + b[0]
    return out


def value_and_grad(params: MlpParams, x) -> tuple[np.ndarray, np.ndarray]:
    xb, _ = _as_batch(params, x)
    jet = Jet(params, xb, order=1)
    return jet.value, jet.grad


def grad_input(params: MlpParams, x) -> np.ndarray:
    """Exact gradient of Phi with respect to the input point(s)."""
    xb, single = _as_batch(params, x)
    g = Jet(params, xb, order=1).grad
    return g[0] if single else g


def grad_params(params: MlpParams, x) -> np.ndarray:
    """dPhi/dtheta in flat layout; ``(P,)`` for one point, ``(n, P)`` for a batch."""
    xb, single = _as_batch(params, x)
    jac = Jet(params, xb, order=0).param_jacobian()
    return jac[0] if single else jac


def param_vjp(params: MlpParams, x, weights) -> np.ndarray:
    """``sum_i weights[i] * dPhi(x_i)/dtheta`` without forming the Jacobian."""
    xb, _ = _as_batch(params, x)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != xb.shape[0]:
        raise ValueError("one weight per point required")
    return Jet(params, xb, order=0).backward(weights)


def laplacian(params: MlpParams, x) -> np.ndarray | float:
    """Trace of the Hessian of Phi at x."""
    xb, single = _as_batch(params, x)
    lap = Jet(params, xb, order=2).lap
    return float(lap[0]) if single else lap


def save_checkpoint(params: MlpParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def checkpoint_bytes(params: MlpParams) -> bytes:
    parts = [MAGIC, struct.pack("<III", CHECKPOINT_VERSION, params.input_dim,
                                len(params.shapes))]
    for w, b in params.layers:
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<d", params.omega0))
    return b"".join(parts)


def load_checkpoint(path) -> MlpParams:
    data = Path(path).read_bytes()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> MlpParams:
    if data[:4] != MAGIC:
        raise ValueError("not a NILS checkpoint")
    version, input_dim, count = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    layers = []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += 8 * rows * cols
        b = np.frombuffer(data, dtype="<f8", count=rows, offset=pos)
        pos += 8 * rows
        layers.append((w.astype(np.float64), b.astype(np.float64)))
    (omega0,) = struct.unpack_from("<d", data, pos)
    pos += 8
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    params = MlpParams.from_layers(layers, omega0)
    if params.input_dim != input_dim:
        raise ValueError("checkpoint input_dim disagrees with first layer")
    return params
