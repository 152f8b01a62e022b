import numpy as np
import pytest

from mfstackelberg.game import (
    ZERO, CostSpec, FollowerDynamics, GameSpec, LeaderDynamics, StationarityMap,
)


def scalar_game(a=-0.5, e=0.3, q=1.0, r=1.0, s=0.5, c=1.0, d=1.0, sigma0=0.0, sigma=0.0,
                b1=None, b1_x1=None, g1_u1=None, project_u1=None, coupled=True):
    """One-dimensional leader and follower with quadratic costs.

    dx0 = (-x0 + u0) dt + sigma0 dW0
    dx1 = (a x1 + u1 + e z + u0) dt + sigma dW1
    g1 = q x1^2 + r u1^2 + q (z - x0)^2 ; G1 = s x1^2
    g0 = c (z - 1)^2 + d u0^2 ; G0 = 0
    """
    one = lambda *args: np.ones(np.broadcast_shapes(*[np.shape(x)[:-1] for x in args[1:]]) + (1, 1))
    zg = q if coupled else 0.0

    def _b1(t, x1, u1, x0, u0, z):
        return a * x1 + u1 + e * z + u0

    spec = GameSpec(
        leader=LeaderDynamics(
            b0=lambda t, x0, u0, z: -x0 + u0, sigma0=np.array([[sigma0]]),
            b0_x0=lambda t, x0, u0, z: -one(t, x0, u0, z), b0_u0=one, b0_z=ZERO),
        follower=FollowerDynamics(
            b1=b1 or _b1, sigma=np.array([[sigma]]),
            b1_x1=b1_x1 or (lambda t, x1, u1, x0, u0, z: a * one(t, x1, u1, x0, u0, z)),
            b1_u1=one, b1_x0=ZERO, b1_u0=one,
            b1_z=lambda t, x1, u1, x0, u0, z: e * one(t, x1, u1, x0, u0, z),
            b1_x1x1=ZERO, b1_x1u1=ZERO, b1_x1x0=ZERO, b1_x1u0=ZERO, b1_x1z=ZERO),
        costs=CostSpec(
            g0=lambda t, x0, u0, z: c * (z[..., 0] - 1.0) ** 2 + d * u0[..., 0] ** 2,
            G0=lambda x0: np.zeros(x0.shape[:-1]),
            g1=lambda t, x1, u1, x0, u0, z: (q * x1[..., 0] ** 2 + r * u1[..., 0] ** 2
                                             + zg * (z[..., 0] - x0[..., 0]) ** 2),
            G1=lambda x1: s * x1[..., 0] ** 2,
            g0_x0=ZERO, g0_u0=lambda t, x0, u0, z: 2 * d * u0,
            g0_z=lambda t, x0, u0, z: 2 * c * (z - 1.0), G0_x0=ZERO,
            g1_x1=lambda t, x1, u1, x0, u0, z: 2 * q * x1,
            g1_u1=g1_u1 or (lambda t, x1, u1, x0, u0, z: 2 * r * u1),
            g1_x0=lambda t, x1, u1, x0, u0, z: -2 * zg * (z - x0),
            g1_u0=ZERO, g1_z=lambda t, x1, u1, x0, u0, z: 2 * zg * (z - x0),
            G1_x1=lambda x1: 2 * s * x1,
            G1_x1x1=lambda x1: 2 * s * np.ones(x1.shape[:-1] + (1, 1)),
            g1_x1x1=lambda t, x1, u1, x0, u0, z: 2 * q * one(t, x1, u1, x0, u0, z),
            g1_x1u1=ZERO, g1_x1x0=ZERO, g1_x1u0=ZERO, g1_x1z=ZERO),
        stationarity=StationarityMap(
            alpha1=lambda t, x1, x0, u0, z, p: -p / (2 * r),
            a1_x1=ZERO, a1_x0=ZERO, a1_u0=ZERO, a1_z=ZERO,
            a1_p=lambda t, x1, x0, u0, z, p: -one(t, x1, x0, u0, z, p) / (2 * r)),
        m0=1, m=1, project_u1=project_u1 or (lambda u: u), name="scalar")
    return spec


@pytest.fixture
def scalar():
    return scalar_game()


# acceptance criteria outcomes, filled by test_acceptance and printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
