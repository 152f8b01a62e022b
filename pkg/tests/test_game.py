import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import scalar_game
from mfstackelberg.errors import ConfigError, StationarityError
from mfstackelberg.game import (
    ParticleEnsemble, SamplingBox, assemble_leader_coefficients, conditional_mean, empirical_average,
    follower_hamiltonian_u, grand_mean, hamiltonian_follower, hamiltonian_leader, newton_stationarity,
    validate_assumptions,
)
from mfstackelberg.numerics import make_grid
from mfstackelberg.unicycle import UnicycleParams, unicycle_game_spec

P = UnicycleParams()
SPEC = unicycle_game_spec(P)


def test_empirical_average_basics():
    assert empirical_average([1.0, 2.0, 3.0]) == 2.0
    v = np.array([0.1, -3.0, 7.0])
    assert np.array_equal(empirical_average([v] * 9), v)
    with pytest.raises(ConfigError):
        empirical_average([])


def test_empirical_average_lln():
    gen = np.random.default_rng(1)
    xs = 2.0 + 0.5 * gen.standard_normal(10 ** 4)
    assert abs(empirical_average(xs) - 2.0) <= 5 * 0.5 / 100


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50)
@given(arrays(float, st.tuples(st.integers(1, 20), st.just(3)), elements=finite), st.randoms())
def test_empirical_average_permutation_invariant(x, rnd):
    perm = list(range(x.shape[0]))
    rnd.shuffle(perm)
    assert np.allclose(empirical_average(x[perm]), empirical_average(x), rtol=1e-12, atol=1e-9)


@settings(max_examples=50)
@given(arrays(float, st.tuples(st.integers(1, 20), st.just(2)), elements=finite),
       arrays(float, (2, 2), elements=st.floats(-3, 3)), arrays(float, (2,), elements=st.floats(-3, 3)))
def test_empirical_average_affine_equivariant(x, A, c):
    lhs = empirical_average(x @ A.T + c)
    rhs = A @ empirical_average(x) + c
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-8)


def test_conditional_mean_constant_and_tower():
    g = make_grid(1.0, 2)
    v = np.array([1.0, -2.0])
    ens = ParticleEnsemble(g, np.broadcast_to(v, (1, 3, 3, 2)))
    assert np.array_equal(conditional_mean(ens, 1)[0], v)
    vals = np.zeros((2, 4, 3, 1))
    vals[0, :, 1, 0] = [1, 2, 3, 4]     # mean 2.5
    vals[1, :, 1, 0] = [10, 10, 11, 11]  # mean 10.5
    ens = ParticleEnsemble(g, vals)
    assert np.array_equal(conditional_mean(ens, 1)[:, 0], [2.5, 10.5])
    assert grand_mean(ens, 1)[0] == 6.5
    assert grand_mean(ens, 1)[0] == vals[:, :, 1, 0].mean()
    with pytest.raises(ConfigError):
        conditional_mean(ens, 3)


@settings(max_examples=30)
@given(arrays(float, st.tuples(st.integers(1, 5), st.integers(1, 6), st.just(2), st.just(1)),
              elements=st.integers(-1000, 1000).map(float)))
def test_tower_property(vals):
    ens = ParticleEnsemble(make_grid(1.0, 1), vals)
    assert np.isclose(grand_mean(ens, 0)[0], vals[:, :, 0, 0].mean(), rtol=1e-12, atol=1e-12)


def test_conditional_mean_unicycle_nested_mc():
    from mfstackelberg.stackelberg import ControlProfile, EnsembleConfig, solve_follower_mp
    spec = unicycle_game_spec(P.replace(sigma=0.5))
    g = make_grid(1.0, 10)
    u0 = ControlProfile.zeros(g, 1)
    z = {}
    for M in (10 ** 4, 10 ** 5):
        mp = solve_follower_mp(u0, spec, EnsembleConfig(R=1, M=M, seed=3), g, tol=1e-6)
        z[M] = mp.z[0]
        # per-coordinate spread over the path; early nodes are nearly deterministic
        sd = mp.x1[0].std(axis=0).max(axis=0)
    assert np.all(np.abs(z[10 ** 4] - z[10 ** 5]) <= 4 * sd / 100)


def test_follower_hamiltonian():
    gen = np.random.default_rng(0)
    x1, p = gen.standard_normal((2, 50, 4))
    u1, u0 = gen.standard_normal((2, 50, 1))
    z = gen.standard_normal((50, 4))
    x0 = np.zeros((50, 0))
    t = np.zeros(50)
    H = hamiltonian_follower(SPEC, t, x1, u1, x0, u0, z, p)
    th, w = x1[:, 2], x1[:, 3]
    ref = (p[:, 0] * P.v * np.cos(th) + p[:, 1] * P.v * np.sin(th) + p[:, 2] * (w + u1[:, 0] + u0[:, 0])
           + P.c1 * ((x1[:, 0] - P.a) ** 2 + (x1[:, 1] - P.b) ** 2) + P.d1 * u1[:, 0] ** 2
           + P.e1 * ((z[:, 0] - P.a) ** 2 + (z[:, 1] - P.b) ** 2))
    assert np.allclose(H, ref, rtol=1e-13, atol=1e-13)
    g1 = SPEC.call("g1", t, x1, u1, x0, u0, z)
    assert np.array_equal(hamiltonian_follower(SPEC, t, x1, u1, x0, u0, z, 0 * p), g1)
    du = follower_hamiltonian_u(SPEC, t, x1, u1, x0, u0, z, p)
    assert np.allclose(du[:, 0], p[:, 2] + 2 * P.d1 * u1[:, 0], rtol=1e-14, atol=1e-14)


def test_leader_hamiltonian_unicycle():
    gen = np.random.default_rng(1)
    B = 40
    x1 = np.zeros((B, 4))
    x1[:, :3] = gen.standard_normal((B, 3))
    p, K1, phi = gen.standard_normal((3, B, 4))
    p[:, 3] = K1[:, 3] = phi[:, 3] = 0.0
    u0 = gen.standard_normal((B, 1))
    x0, K0, t = np.zeros((B, 0)), np.zeros((B, 0)), np.zeros(B)
    z = x1
    H = hamiltonian_leader(SPEC, t, x1, x0, u0, z, p, K0, K1, phi)
    th = x1[:, 2]
    v, a, b = P.v, P.a, P.b
    ref = (K1[:, 0] * v * np.cos(th) + K1[:, 1] * v * np.sin(th) + K1[:, 2] * (-p[:, 2] / (2 * P.d1) + u0[:, 0])
           - 2 * P.c1 * phi[:, 0] * (x1[:, 0] - a) - 2 * P.c1 * phi[:, 1] * (x1[:, 1] - b)
           - phi[:, 2] * (-v * np.sin(th) * p[:, 0] + v * np.cos(th) * p[:, 1])
           + P.c0 * (x1[:, 0] - a) ** 2 + P.c0 * (x1[:, 1] - b) ** 2 + P.d0 * u0[:, 0] ** 2)
    assert np.allclose(H, ref, rtol=1e-13, atol=1e-13)
    g0 = SPEC.call("g0", t, x0, u0, z)
    zero = np.zeros_like(K1)
    assert np.allclose(hamiltonian_leader(SPEC, t, x1, x0, u0, z, p, K0, zero, zero), g0, rtol=0, atol=0)
    # dH0/du0 = K13 + 2 d0 u0 by central differences
    eps = 1e-6
    fd = (hamiltonian_leader(SPEC, t, x1, x0, u0 + eps, z, p, K0, K1, phi)
          - hamiltonian_leader(SPEC, t, x1, x0, u0 - eps, z, p, K0, K1, phi)) / (2 * eps)
    assert np.allclose(fd, K1[:, 2] + 2 * P.d0 * u0[:, 0], rtol=1e-7, atol=1e-7)


def test_assembled_unicycle_blocks():
    gen = np.random.default_rng(2)
    B = 30
    x1, p = gen.standard_normal((2, B, 4))
    u0 = gen.standard_normal((B, 1))
    args = (np.zeros(B), x1, np.zeros((B, 0)), u0, x1, p)
    co = assemble_leader_coefficients(SPEC)
    th = x1[:, 2]
    B1 = co.B1(*args)
    assert np.allclose(B1[:, 2], x1[:, 3] - p[:, 2] / (2 * P.d1) + u0[:, 0], rtol=1e-14)
    Phi = co.Phi(*args)
    ref = np.stack([2 * P.c1 * (x1[:, 0] - P.a), 2 * P.c1 * (x1[:, 1] - P.b),
                    -P.v * np.sin(th) * p[:, 0] + P.v * np.cos(th) * p[:, 1], p[:, 2]], axis=-1)
    # the fourth component of Phi is the w-row of b1_x1^T p, i.e. p3; the leader BVP drops it
    assert np.allclose(Phi, ref, rtol=1e-13, atol=1e-13)
    jac = co.jacobians(*args)
    expect = np.zeros((4, 4))
    expect[2, 2] = -1 / (2 * P.d1)
    assert np.allclose(jac["B1_p"], expect)
    # finite differences of the assembled B1 in p
    eps = 1e-6
    for c in range(4):
        dp = np.zeros(4)
        dp[c] = eps
        a_p = list(args)
        a_m = list(args)
        a_p[5], a_m[5] = p + dp, p - dp
        fd = (co.B1(*a_p) - co.B1(*a_m)) / (2 * eps)
        assert np.allclose(fd, jac["B1_p"][..., c], atol=1e-8)


def test_assembled_jacobians_match_finite_differences(scalar):
    gen = np.random.default_rng(5)
    B = 20
    t = np.zeros(B)
    x1, x0, u0, z, p = gen.standard_normal((5, B, 1))
    co = assemble_leader_coefficients(scalar)
    jac = co.jacobians(t, x1, x0, u0, z, p)
    base = {"x1": x1, "x0": x0, "u0": u0, "z": z, "p": p}
    eps = 1e-6
    for w in base:
        for name in ("B1", "Phi"):
            ap, am = dict(base), dict(base)
            ap[w], am[w] = base[w] + eps, base[w] - eps
            f = getattr(co, name)
            fd = (f(t, **ap) - f(t, **am)) / (2 * eps)
            assert np.allclose(fd[..., 0], jac[f"{name}_{w}"][..., 0, 0], atol=1e-7), (name, w)


def test_uncontrolled_drift_substitution_vacuous():
    spec = scalar_game(b1=lambda t, x1, u1, x0, u0, z: -x1, b1_x1=lambda *a: -np.ones(a[1].shape + (1,)))
    co = assemble_leader_coefficients(spec)
    x1 = np.linspace(-1, 1, 7)[:, None]
    args = (np.zeros(7), x1, x1, x1, x1, 3 * x1)
    assert np.array_equal(co.B1(*args), -x1)


def test_missing_partial_is_named():
    from dataclasses import replace
    spec = replace(SPEC, costs=replace(SPEC.costs, g1_x1x1=None))
    with pytest.raises(ConfigError, match="g1_x1x1"):
        assemble_leader_coefficients(spec)
    with pytest.raises(ConfigError):
        hamiltonian_leader(spec, 0.0, np.zeros(4), np.zeros(0), np.zeros(1), np.zeros(4), np.zeros(4),
                           np.zeros(0), np.zeros(4), np.zeros(4))


def test_validate_unicycle_passes():
    box = SamplingBox(x1=([-5, -5, -np.pi, -2], [5, 5, np.pi, 2]), p=10.0)
    rep = validate_assumptions(SPEC, box, samples=1000)
    assert rep.passed, rep.violations
    assert rep.stationarity_residual <= 1e-8
    assert max(rep.fd_error.values()) <= 1e-5


def test_validate_flags_growth():
    spec = scalar_game(b1=lambda t, x1, u1, x0, u0, z: x1 ** 2,
                       b1_x1=lambda t, x1, u1, x0, u0, z: (2 * x1)[..., None])
    rep = validate_assumptions(spec, SamplingBox(x1=1e3), samples=200)
    flags = [v for v in rep.violations if v["check"] == "growth"]
    assert flags and flags[0]["symbol"] == "b1"
    assert "x1" in flags[0]["witness"]


def test_validate_flags_wrong_derivative():
    spec = scalar_game(g1_u1=lambda t, x1, u1, x0, u0, z: 4 * u1)  # true value is 2 r u1
    rep = validate_assumptions(spec, samples=200)
    fd = [v for v in rep.violations if v["check"] == "finite-difference"]
    assert any(v["symbol"] == "g1_u1" for v in fd)
    assert all("witness" in v for v in fd)


def test_newton_finds_unicycle_closed_form():
    p = np.array([0.3, -0.2, 1.7, 0.0])
    u, roots = newton_stationarity(SPEC, 0.0, np.zeros(4), np.zeros(0), np.array([0.2]), np.zeros(4), p,
                                   starts=[[0.0], [5.0]])
    assert len(roots) == 1
    assert abs(u[0] + p[2] / (2 * P.d1)) < 1e-10


def test_newton_picks_lowest_hamiltonian_root():
    # H1 = u^4/4 - u^2/2 + 0.1 u has two local minima; the lower is the negative root
    from dataclasses import replace
    spec = scalar_game()
    b1 = lambda t, x1, u1, x0, u0, z: np.zeros_like(x1)
    g1 = lambda t, x1, u1, x0, u0, z: u1[..., 0] ** 4 / 4 - u1[..., 0] ** 2 / 2 + 0.1 * u1[..., 0]
    g1u = lambda t, x1, u1, x0, u0, z: u1 ** 3 - u1 + 0.1
    spec = replace(spec, follower=replace(spec.follower, b1=b1, b1_u1=lambda *a: np.zeros(a[1].shape + (1,))),
                   costs=replace(spec.costs, g1=g1, g1_u1=g1u))
    z1 = np.zeros(1)
    u, roots = newton_stationarity(spec, 0.0, z1, z1, z1, z1, z1, starts=[[-1.5], [0.1], [1.5]])
    assert len(roots) == 3
    assert u[0] < -0.9


def test_newton_reports_failure():
    from dataclasses import replace
    spec = scalar_game()
    spec = replace(spec, follower=replace(spec.follower, b1_u1=lambda *a: np.zeros(a[1].shape + (1,))),
                   costs=replace(spec.costs, g1_u1=lambda t, x1, u1, x0, u0, z: np.exp(u1)))
    z1 = np.zeros(1)
    with pytest.raises(StationarityError):
        newton_stationarity(spec, 0.0, z1, z1, z1, z1, z1, starts=[[0.0]], max_iter=5)


@settings(max_examples=40)
@given(arrays(float, (6,), elements=st.floats(-50, 50)), arrays(float, (6,), elements=st.floats(-50, 50)))
def test_projection_idempotent_nonexpansive(a, b):
    proj = lambda u: np.maximum(u, 0.0)
    spec = scalar_game(project_u1=proj)
    pa, pb = spec.project_u1(a), spec.project_u1(b)
    assert np.array_equal(spec.project_u1(pa), pa)
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12


def test_spec_dims_and_deterministic():
    assert SPEC.dims == {"k": 0, "j0": 0, "n": 4, "j": 1, "m0": 1, "m": 1}
    assert SPEC.deterministic
    assert not unicycle_game_spec(P.replace(sigma=0.1)).deterministic
    with pytest.raises(ConfigError):
        SPEC.call("b1", 0.0, np.zeros(4))
