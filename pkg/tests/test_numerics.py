import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfstackelberg.errors import ConfigError, NumericalBlowup
from mfstackelberg.numerics import (
    RegressionConditioner, RngSpec, SamplePath, backward_sweep, euler_forward, l2_time_norm,
    make_grid, make_noise, poly_features, sample_brownian,
)


def test_grid_nodes():
    assert np.array_equal(make_grid(1.0, 4).t, [0, 0.25, 0.5, 0.75, 1.0])
    assert np.array_equal(make_grid(2.0, 1).t, [0.0, 2.0])


def test_grid_last_node_pinned():
    g = make_grid(1.0, 10 ** 6)
    assert g.t[-1] == 1.0
    assert g.t.size == 10 ** 6 + 1


@pytest.mark.parametrize("T,n", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5), (float("inf"), 3)])
def test_grid_rejects_bad_input(T, n):
    with pytest.raises(ConfigError):
        make_grid(T, n)


@given(st.floats(1e-3, 1e3), st.integers(1, 5000))
def test_grid_endpoint_and_spacing(T, n):
    g = make_grid(T, n)
    assert g.t[0] == 0.0 and g.t[-1] == T
    assert np.all(np.diff(g.t) > 0)
    assert g.h == T / n


def test_sample_path_validation():
    g = make_grid(1.0, 3)
    with pytest.raises(ConfigError):
        SamplePath(g, np.zeros(3))
    with pytest.raises(NumericalBlowup) as exc:
        SamplePath(g, np.array([0.0, 1.0, np.nan, 2.0]))
    assert exc.value.node == 2
    assert SamplePath(g, np.zeros(4)).dim == 1


def test_brownian_starts_at_zero_and_is_reproducible():
    g = make_grid(1.0, 50)
    a = sample_brownian(g, 3, RngSpec(11), particle=5)
    b = sample_brownian(g, 3, RngSpec(11), particle=5)
    assert np.all(a.values[0] == 0.0)
    assert a.values.tobytes() == b.values.tobytes()
    c = sample_brownian(g, 3, RngSpec(12), particle=5)
    assert not np.array_equal(a.values, c.values)


def test_brownian_moments():
    g = make_grid(1.0, 1)
    W1 = RngSpec(3).normals(1, 0, 0, 10 ** 5, 1)[:, 0] * np.sqrt(g.h)
    assert abs(W1.mean()) <= 4 / np.sqrt(1e5)
    assert abs(W1.var() - 1.0) <= 0.05


def test_brownian_increment_variance_scales_with_h():
    g = make_grid(2.0, 8)
    z = np.stack([sample_brownian(g, 1, RngSpec(1), particle=i).increments()[:, 0] for i in range(4000)])
    assert abs(z.var() / g.h - 1.0) < 0.05


def test_particles_reproducible_in_isolation():
    rng = RngSpec(99)
    block = rng.normals(1, 2, 0, 40, 13)
    for i in (0, 7, 39):
        assert rng.normals(1, 2, i, 1, 13)[0].tobytes() == block[i].tobytes()


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_noise_bytes_independent_of_workers(workers):
    g = make_grid(1.0, 20)
    a = make_noise(g, 3, 50, 1, 2, RngSpec(5), workers=1)
    b = make_noise(g, 3, 50, 1, 2, RngSpec(5), workers=workers)
    assert a.dW.tobytes() == b.dW.tobytes()
    assert a.dW0.tobytes() == b.dW0.tobytes()
    assert np.all(a.common[:, 0] == 0) and np.all(a.idiosyncratic[:, :, 0] == 0)


def test_rng_rejects_bad_seed():
    with pytest.raises(ConfigError):
        RngSpec(-1)
    with pytest.raises(ConfigError):
        RngSpec(2 ** 64)


def test_euler_constant_drift_exact():
    g = make_grid(1.0, 8)
    W = SamplePath(g, np.zeros((9, 1)))
    X = euler_forward(lambda t, x, k: np.array([2.0, -1.0]), np.zeros((2, 1)), [1.0, 3.0], W, g)
    assert np.allclose(X.values, np.array([1.0, 3.0]) + np.outer(g.t, [2.0, -1.0]), atol=1e-14)


def test_euler_pure_noise():
    g = make_grid(1.0, 16)
    W = sample_brownian(g, 2, RngSpec(4))
    X = euler_forward(lambda t, x, k: np.zeros(2), np.eye(2), [0.5, -0.5], W, g)
    assert np.allclose(X.values, np.array([0.5, -0.5]) + W.values, atol=1e-14)


def test_euler_first_order_exponential():
    errs = []
    for n in (50, 100, 200, 400):
        g = make_grid(1.0, n)
        X = euler_forward(lambda t, x, k: x, np.zeros((1, 1)), [1.0], SamplePath(g, np.zeros((n + 1, 1))), g)
        errs.append(abs(X.values[-1, 0] - np.e))
        assert errs[-1] <= 1.5 * g.h * np.e
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    assert np.all(ratios <= 0.6) and np.all(ratios >= 0.4)


def test_euler_blowup_reports_node():
    g = make_grid(1.0, 10)
    W = SamplePath(g, np.zeros((11, 1)))
    with pytest.raises(NumericalBlowup) as exc:
        euler_forward(lambda t, x, k: x * (np.inf if k == 3 else 1.0), np.zeros((1, 1)), [1.0], W, g)
    assert exc.value.node == 3


def test_euler_diffusion_shape_checked():
    g = make_grid(1.0, 4)
    with pytest.raises(ConfigError):
        euler_forward(lambda t, x, k: x, np.eye(2), [1.0], SamplePath(g, np.zeros((5, 1))), g)


def test_backward_constant_terminal():
    g = make_grid(1.0, 10)
    sol = backward_sweep(lambda k, y: np.zeros_like(y), np.array([2.5, -1.0]), g)
    assert np.all(sol.Y == np.array([2.5, -1.0]))
    assert not np.any(sol.L1)


def test_backward_linear_integration():
    g = make_grid(1.0, 10)
    sol = backward_sweep(lambda k, y: np.ones_like(y), np.zeros(1), g)
    assert np.allclose(sol.Y[:, 0], 1.0 - g.t, atol=1e-14)


def test_backward_exponential_oracle():
    a = 0.7
    errs = []
    for n in (50, 100, 200):
        g = make_grid(1.0, n)
        sol = backward_sweep(lambda k, y: a * y, np.ones(1), g)
        errs.append(abs(sol.Y[0, 0] - np.exp(a)))
        assert errs[-1] <= 2 * g.h * np.exp(a)
    assert errs[2] / errs[1] <= 0.6


def test_backward_reverses_forward():
    n = 400
    g = make_grid(1.0, n)
    X = euler_forward(lambda t, x, k: -0.8 * x, np.zeros((1, 1)), [1.3], SamplePath(g, np.zeros((n + 1, 1))), g)
    Y = backward_sweep(lambda k, y: 0.8 * y, X.values[-1], g).Y
    assert np.max(np.abs(Y[:, 0] - X.values[:, 0])) <= 10 * g.h


def test_backward_stochastic_needs_ensemble():
    g = make_grid(1.0, 4)
    dW = np.zeros((2, 3, 4, 1))
    with pytest.raises(ConfigError):
        backward_sweep(lambda k, y: y, np.zeros((2, 3, 1)), g, conditioning=None, dW1=dW)


def test_backward_martingale_integrand_of_brownian_terminal():
    g = make_grid(1.0, 20)
    nz = make_noise(g, 1, 4000, 0, 1, RngSpec(2))
    W = nz.idiosyncratic
    cond = RegressionConditioner(W, degree=1)
    sol = backward_sweep(lambda k, y: np.zeros_like(y), W[:, :, -1], g, cond, dW1=nz.dW)
    # Y = W(t) and L1 = 1 for the terminal W(T), up to regression sampling error
    se = np.sqrt(g.T / nz.M)
    assert abs(sol.Y[0, 0, 0, 0]) <= 4 * se
    assert np.max(np.abs(sol.Y - W)) <= 2 * 4 * se
    assert abs(np.mean(sol.L1[..., 0, 0]) - 1.0) < 0.02


def test_regression_exact_on_polynomials():
    gen = np.random.default_rng(0)
    states = gen.standard_normal((1, 200, 3, 2))
    cond = RegressionConditioner(states, degree=2)
    x = states[:, :, 1]
    vals = (1 + 2 * x[..., :1] - x[..., 1:] ** 2 + x[..., :1] * x[..., 1:])
    assert np.allclose(cond.expect(1, vals), vals, atol=1e-10)


def test_poly_features_count():
    z = np.ones((5, 3))
    assert poly_features(z, 0).shape[-1] == 1
    assert poly_features(z, 1).shape[-1] == 4
    assert poly_features(z, 2).shape[-1] == 10


@settings(max_examples=30)
@given(st.floats(-5, 5), st.integers(1, 50))
def test_l2_norm_of_constant(c, n):
    g = make_grid(1.0, n)
    a = np.full((n + 1, 1), c)
    assert np.isclose(l2_time_norm(a, g), abs(c), rtol=1e-12, atol=1e-14)
