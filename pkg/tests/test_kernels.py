import os
import subprocess
import sys

import numpy as np
from hypothesis import given, settings, strategies as st

from mfstackelberg import kernels


def test_finite_n_fallback_matches_loop():
    gen = np.random.default_rng(0)
    B, N, n = 3, 5, 40
    args = (gen.standard_normal((B, N, 4)), gen.standard_normal((B, N, n)), gen.standard_normal(n),
            gen.standard_normal((B, N, n)), 0.025, 1.3, 0.4)
    a = kernels._finite_n_py(*args)
    b = kernels._finite_n_np(*args)
    assert np.array_equal(a, b)
    assert np.array_equal(kernels.unicycle_paths(*args), a)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.floats(0.01, 1.0))
def test_quadratic_cost_backends_agree(B, n, h):
    gen = np.random.default_rng(B * 100 + n)
    x, y = gen.standard_normal((2, B, n + 1))
    u = gen.standard_normal((B, n))
    a = kernels._quad_cost_py(x, y, u, 0.5, 0.3, 1.0, 2.0, h)
    b = kernels._quad_cost_np(x, y, u, 0.5, 0.3, 1.0, 2.0, h)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-15)
    assert np.allclose(kernels.quadratic_cost(x, y, u, 0.5, 0.3, 1.0, 2.0, h), a, rtol=1e-13)


def test_shoot_compiled_matches_python():
    z = np.array([0.1, -0.5, -0.3, 0.05, -0.4, -0.2])
    coef = np.array([1.0, 0.5, 0.3, 1.0, 1.0, 1.0, 1.0])
    a = kernels._shoot_py(z, coef, 0.01, 100)
    b = kernels.unicycle_shoot(z, coef, 0.01, 100)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-13, atol=1e-15)


def test_rollout_zero_steering_is_straight():
    x, y, th = kernels.unicycle_rollout(np.zeros((2, 10)), 0.1, 2.0)
    assert np.allclose(x, 0.2 * np.arange(11))
    assert not np.any(y) and not np.any(th)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, MFSTACKELBERG_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from mfstackelberg import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
