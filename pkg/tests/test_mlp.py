import numpy as np
import pytest
from hypothesis import given, strategies as st

from implicit_flow import mlp
from implicit_flow.extraction import GridSpec, marching_cubes
from implicit_flow.fields import AnalyticField, FitConfig, fit_sdf

from conftest import richardson_fd


def linear_net(w, b):
    return mlp.MlpParams.from_layers([(np.asarray(w, dtype=float)[None, :], [b])])


def test_init_full_size_width_and_depth():
    p = mlp.init_siren(3, 512, 5, 30.0, seed=1)
    assert len(p.shapes) == 5
    assert [s[0] for s in p.shapes[:-1]] == [512] * 4
    assert p.shapes[0] == (512, 3)
    assert p.output_dim == 1


def test_init_is_deterministic_and_seed_sensitive():
    a = mlp.init_siren(2, 8, 2, 30.0, seed=3)
    b = mlp.init_siren(2, 8, 2, 30.0, seed=3)
    assert np.array_equal(a.theta, b.theta)
    c = mlp.init_siren(3, 64, 3, 30.0, seed=1)
    d = mlp.init_siren(3, 64, 3, 30.0, seed=2)
    assert not np.array_equal(c.theta, d.theta)


def test_init_bounds():
    p = mlp.init_siren(3, 64, 3, 30.0, seed=0)
    (w0, _), (w1, _), (w2, _) = p.layers
    assert np.abs(w0).max() <= 1 / 3
    assert np.abs(w1).max() <= np.sqrt(6 / 64) / 30


def test_params_validation():
    with pytest.raises(ValueError):
        mlp.MlpParams(np.zeros(5), ((2, 3), (1, 3)))
    with pytest.raises(ValueError):
        mlp.MlpParams(np.zeros(12), ((2, 3), (1, 2)))  # layout needs 11
    layers = [(np.ones((2, 3)), np.zeros(2)), (np.ones((1, 2)), [np.nan])]
    with pytest.raises(ValueError):
        mlp.MlpParams.from_layers(layers)
    with pytest.raises(ValueError):
        mlp.init_siren(3, 8, 1)


def test_constant_network():
    p = mlp.init_siren(3, 8, 3, seed=0)
    theta = np.zeros(p.size)
    theta[p.final_bias_index()] = 0.7
    q = p.with_theta(theta)
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert np.all(mlp.forward(q, x) == 0.7)


def test_input_shape_checked(random_net):
    with pytest.raises(ValueError):
        mlp.forward(random_net, np.zeros((4, 2)))


def test_linear_network_gradient_and_laplacian():
    p = linear_net([0.3, -1.2, 2.0], 0.5)
    x = np.random.default_rng(1).normal(size=(10, 3))
    assert np.allclose(mlp.grad_input(p, x), [0.3, -1.2, 2.0], atol=0, rtol=0)
    assert np.all(mlp.laplacian(p, x) == 0.0)
    assert mlp.forward(p, np.zeros(3)) == 0.5


@given(seed=st.integers(0, 10_000))
def test_grad_input_matches_fd(seed):
    rng = np.random.default_rng(seed)
    p = mlp.init_siren(3, 16, 3, 30.0, seed=seed)
    x = rng.uniform(-1, 1, size=3)
    fd = richardson_fd(lambda y: mlp.forward(p, y), x)
    g = mlp.grad_input(p, x)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


@given(seed=st.integers(0, 10_000))
def test_grad_params_matches_fd(seed):
    rng = np.random.default_rng(seed)
    p = mlp.init_siren(2, 6, 3, 30.0, seed=seed)
    x = rng.uniform(-1, 1, size=2)
    fd = richardson_fd(lambda th: mlp.forward(p.with_theta(th), x), p.theta, h=1e-5)
    g = mlp.grad_params(p, x)
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_grad_params_final_bias_is_one(random_net):
    x = np.random.default_rng(2).normal(size=(5, 3))
    jac = mlp.grad_params(random_net, x)
    assert np.all(jac[:, random_net.final_bias_index()] == 1.0)
    again = mlp.grad_params(random_net, x)
    assert np.array_equal(jac, again)


def test_param_vjp_equals_weighted_jacobian(random_net):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(7, 3))
    w = rng.normal(size=7)
    assert np.allclose(mlp.param_vjp(random_net, x, w), w @ mlp.grad_params(random_net, x),
                       rtol=1e-12, atol=1e-12)


@given(seed=st.integers(0, 10_000))
def test_laplacian_matches_fd_hessian_trace(seed):
    rng = np.random.default_rng(seed)
    p = mlp.init_siren(3, 12, 3, 30.0, seed=seed)
    x = rng.uniform(-1, 1, size=3)
    # trace of the Hessian from differences of the exact gradient
    fd = sum(richardson_fd(lambda y: mlp.grad_input(p, y)[k], x)[k] for k in range(3))
    lap = mlp.laplacian(p, x)
    assert abs(lap - fd) <= 1e-5 * max(abs(fd), 1.0)


def test_laplacian_of_engineered_quadratic():
    # sin(a t) ~ a t - (a t)^3/6; sum_k c (sin(a x_k) pairs) approximates |x|^2 - 1
    # through cos: 1 - cos(a x) ~ (a x)^2 / 2, and cos(a x) = sin(a x + pi/2)
    a, d = 1e-2, 3
    w0 = a * np.eye(d) / 30.0
    b0 = np.full(d, np.pi / 2) / 30.0
    w1 = np.full((1, d), -2.0 / a ** 2)
    b1 = np.array([2.0 * d / a ** 2 - 1.0])
    p = mlp.MlpParams.from_layers([(w0, b0), (w1, b1)], 30.0)
    x = np.random.default_rng(4).uniform(-0.8, 0.8, size=(20, d))
    assert np.allclose(mlp.forward(p, x), np.sum(x ** 2, axis=1) - 1, atol=1e-4)
    assert np.allclose(mlp.laplacian(p, x), 2 * d, atol=1e-3)


def test_pure_functions(random_net):
    x = np.random.default_rng(5).normal(size=(9, 3))
    before = random_net.theta.copy()
    for fn in (mlp.forward, mlp.grad_input, mlp.laplacian):
        assert np.array_equal(fn(random_net, x), fn(random_net, x))
    assert np.array_equal(random_net.theta, before)


def test_evaluate_chunking_matches_forward(random_net):
    x = np.random.default_rng(6).normal(size=(1000, 3))
    assert np.allclose(mlp.evaluate(random_net, x, chunk=97), mlp.evaluate(random_net, x),
                       rtol=1e-13, atol=1e-14)


def test_checkpoint_round_trip(tmp_path, random_net):
    path = tmp_path / "net.nils"
    mlp.save_checkpoint(random_net, path)
    back = mlp.load_checkpoint(path)
    assert np.array_equal(back.theta, random_net.theta)
    assert back.shapes == random_net.shapes and back.omega0 == random_net.omega0


def test_checkpoint_rejects_garbage(random_net):
    data = mlp.checkpoint_bytes(random_net)
    with pytest.raises(ValueError):
        mlp.checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        mlp.checkpoint_from_bytes(data + b"\0")
    bad_version = data[:4] + (99).to_bytes(4, "little") + data[8:]
    with pytest.raises(ValueError):
        mlp.checkpoint_from_bytes(bad_version)


def test_fitted_sphere_values(sphere_net):
    # radius 0.5, so the centre should read -0.5; the centre is the cone tip
    # of |x| - r, which a smooth network rounds off, hence the looser bound
    assert abs(mlp.forward(sphere_net, np.zeros(3)) + 0.5) < 0.2 * 0.5
    rng = np.random.default_rng(0)
    d = rng.normal(size=(50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for r in (0.3, 0.4, 0.6, 0.7):
        assert np.abs(mlp.forward(sphere_net, r * d) - (r - 0.5)).max() < 0.03


def test_zero_set_vertices_are_near_zero(sphere_net):
    grid = GridSpec.cube(48)
    mesh = marching_cubes(sphere_net, grid)
    v = np.abs(mlp.forward(sphere_net, mesh.vertices))
    # linear interpolation along an edge of length h errs by at most
    # max|Phi''| h^2 / 8; a bound of one cell is generous for a smooth fit
    assert v.max() < grid.cell_size[0]


def test_fitted_plane_gradient_is_unit_normal():
    plane = AnalyticField("plane", normal=np.array([0.0, 0.6, 0.8]), offset=0.1)
    # a low first-layer frequency suits a field without detail
    p = fit_sdf(plane, FitConfig(hidden_width=32, depth=3, omega0=10.0, lr=3e-4,
                                 iterations=1500, batch_size=1024), seed=0, check=False)
    rng = np.random.default_rng(0)
    u = rng.uniform(-0.6, 0.6, size=(200, 3))
    x = u - (u @ plane.normal - plane.offset)[:, None] * plane.normal
    g = mlp.grad_input(p, x)
    n = np.linalg.norm(g, axis=1)
    assert np.all((n > 0.95) & (n < 1.05))
    cos = (g @ plane.normal) / n
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 5.0


def test_laplacian_is_noisy_on_flat_edges():
    square = AnalyticField("square2d", center=np.zeros(2), half_extent=0.5)
    p = fit_sdf(square, FitConfig(hidden_width=32, depth=3, lr=3e-4, iterations=600,
                                  batch_size=1024), seed=0, check=False)
    t = np.linspace(-0.35, 0.35, 200)
    x = np.stack([t, np.full_like(t, 0.5)], axis=1)
    lap = mlp.laplacian(p, x)
    # the exact field has zero curvature along the edge
    assert np.std(lap) > 0.1
