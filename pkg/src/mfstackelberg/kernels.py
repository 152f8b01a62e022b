"""Sequential inner loops compiled with numba, with pure-numpy fallbacks.

Set MFSTACKELBERG_NO_NUMBA=1 to force the fallbacks (or when numba is not
importable).  Both paths perform the same floating-point operations in the
same order, so results agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MFSTACKELBERG_NO_NUMBA", "").strip() not in ("", "0")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


def unicycle_rollout(u, h, v):
    """Deterministic unicycle positions for total steering u (..., n), zero start.

    Returns x, y, theta of shape (..., n+1).  The heading is a cumulative sum,
    so this is vectorized in numpy on both backends.
    """
    u = np.asarray(u, dtype=float)
    th = np.zeros(u.shape[:-1] + (u.shape[-1] + 1,))
    th[..., 1:] = np.cumsum(h * u, axis=-1)
    x = np.zeros_like(th)
    y = np.zeros_like(th)
    x[..., 1:] = np.cumsum(h * v * np.cos(th[..., :-1]), axis=-1)
    y[..., 1:] = np.cumsum(h * v * np.sin(th[..., :-1]), axis=-1)
    return x, y, th


def _shoot_py(z, coef, h, n):
    v, a, b, c0, c1, d0, d1 = coef
    X = np.zeros((n + 1, 3))
    p = np.zeros((n + 1, 3))
    K = np.zeros((n + 1, 3))
    phi = np.zeros((n + 1, 3))
    u0 = np.zeros(n + 1)
    u1 = np.zeros(n + 1)
    p[0] = z[:3]
    K[0] = z[3:]
    for k in range(n):
        x, y, th = X[k, 0], X[k, 1], X[k, 2]
        s, c = np.sin(th), np.cos(th)
        p1 = p[k, 0] - h * 2.0 * c1 * (x - a)
        p2 = p[k, 1] - h * 2.0 * c1 * (y - b)
        p3 = p[k, 2] - h * v * (-s * p1 + c * p2)
        K1 = K[k, 0] - h * (-2.0 * c1 * phi[k, 0] + 2.0 * c0 * (x - a))
        K2 = K[k, 1] - h * (-2.0 * c1 * phi[k, 1] + 2.0 * c0 * (y - b))
        K3 = K[k, 2] - h * (-v * s * K1 + v * c * K2 + v * phi[k, 2] * (c * p1 + s * p2))
        u1[k] = -p3 / (2.0 * d1)
        u0[k] = -K3 / (2.0 * d0)
        X[k + 1, 0] = x + h * v * c
        X[k + 1, 1] = y + h * v * s
        X[k + 1, 2] = th + h * (u1[k] + u0[k])
        phi[k + 1, 0] = phi[k, 0] - h * v * phi[k, 2] * s
        phi[k + 1, 1] = phi[k, 1] + h * v * phi[k, 2] * c
        phi[k + 1, 2] = phi[k, 2] + h * K3 / (2.0 * d1)
        p[k + 1, 0], p[k + 1, 1], p[k + 1, 2] = p1, p2, p3
        K[k + 1, 0], K[k + 1, 1], K[k + 1, 2] = K1, K2, K3
    return X, p, K, phi, u0, u1


_shoot_jit = njit(cache=False)(_shoot_py) if HAVE_NUMBA else _shoot_py


def unicycle_shoot(z, coef, h, n):
    """Integrate the leader boundary-value recurrences forward from initial
    adjoints z = (p(0), K(0)); the backward equations are inverted exactly."""
    return _shoot_jit(np.asarray(z, dtype=float), np.asarray(coef, dtype=float), float(h), int(n))


def _finite_n_py(x0, u_idio, u_lead, dW, h, v, sigma):
    """Unicycle finite-N Euler pass.

    x0: (B, N, 4) initial states; u_idio: (B, N, n) follower controls;
    u_lead: (n,) leader control; dW: (B, N, n) heading-noise increments.
    Returns the (B, N, n+1, 4) paths.
    """
    B, N, n = u_idio.shape
    X = np.empty((B, N, n + 1, 4))
    X[:, :, 0] = x0
    for bi in range(B):
        for i in range(N):
            for k in range(n):
                th = X[bi, i, k, 2]
                w = X[bi, i, k, 3]
                X[bi, i, k + 1, 0] = X[bi, i, k, 0] + h * v * np.cos(th)
                X[bi, i, k + 1, 1] = X[bi, i, k, 1] + h * v * np.sin(th)
                X[bi, i, k + 1, 2] = th + h * (w + u_idio[bi, i, k] + u_lead[k])
                X[bi, i, k + 1, 3] = w + sigma * dW[bi, i, k]
    return X


def _finite_n_np(x0, u_idio, u_lead, dW, h, v, sigma):
    B, N, n = u_idio.shape
    X = np.empty((B, N, n + 1, 4))
    X[:, :, 0] = x0
    for k in range(n):
        th = X[:, :, k, 2]
        w = X[:, :, k, 3]
        X[:, :, k + 1, 0] = X[:, :, k, 0] + h * v * np.cos(th)
        X[:, :, k + 1, 1] = X[:, :, k, 1] + h * v * np.sin(th)
        X[:, :, k + 1, 2] = th + h * (w + u_idio[:, :, k] + u_lead[k])
        X[:, :, k + 1, 3] = w + sigma * dW[:, :, k]
    return X


_finite_n_jit = njit(cache=False)(_finite_n_py) if HAVE_NUMBA else None


def unicycle_paths(x0, u_idio, u_lead, dW, h, v, sigma):
    """Finite-population unicycle paths.  The unicycle followers interact only
    through costs, so the population pass decouples per follower."""
    args = (np.ascontiguousarray(x0, dtype=float), np.ascontiguousarray(u_idio, dtype=float),
            np.ascontiguousarray(u_lead, dtype=float), np.ascontiguousarray(dW, dtype=float),
            float(h), float(v), float(sigma))
    if HAVE_NUMBA:
        return _finite_n_jit(*args)
    return _finite_n_np(*args)


def _quad_cost_py(x, y, u, a, b, c, d, h):
    """sum_k h (c|x-a|^2 + c|y-b|^2 + d u^2) over the last axis, k < n."""
    B = x.shape[0]
    n = u.shape[1]
    out = np.zeros(B)
    for i in range(B):
        acc = 0.0
        for k in range(n):
            acc += c * ((x[i, k] - a) ** 2 + (y[i, k] - b) ** 2) + d * u[i, k] ** 2
        out[i] = h * acc
    return out


def _quad_cost_np(x, y, u, a, b, c, d, h):
    n = u.shape[1]
    return h * np.sum(c * ((x[:, :n] - a) ** 2 + (y[:, :n] - b) ** 2) + d * u ** 2, axis=1)


_quad_cost_jit = njit(cache=False)(_quad_cost_py) if HAVE_NUMBA else None


def quadratic_cost(x, y, u, a, b, c, d, h):
    """Batched running cost for (B, n+1) paths and (B, n) controls."""
    args = (np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(y, dtype=float),
            np.ascontiguousarray(u, dtype=float), float(a), float(b), float(c), float(d), float(h))
    if HAVE_NUMBA:
        return _quad_cost_jit(*args)
    return _quad_cost_np(*args)
