"""Time grids, reproducible Brownian noise, Euler-Maruyama and backward sweeps.

Every solver in the package works on a uniform grid and stores processes as
arrays whose second-to-last axis is the time node.  Ensembles use the layout
``(R, M, n_steps + 1, d)``: R common-noise realizations, M idiosyncratic
particles per realization.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations_with_replacement
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericalBlowup

TAG_COMMON = 1
TAG_IDIO = 2
TAG_INIT = 3
TAG_AUDIT = 8

DEFAULT_SEED = 20240531
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*h on [0, T] with the last node pinned to T."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def t(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1, dtype=float) * self.h
        t[-1] = self.T
        t.flags.writeable = False
        return t

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.n_steps * factor)


def make_grid(T: float, n_steps: int) -> TimeGrid:
    return TimeGrid(T, n_steps)


@dataclass(frozen=True)
class SamplePath:
    """Values of a d-dimensional process at every node of a grid."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.n_steps + 1:
            raise ConfigError(
                f"path needs shape ({self.grid.n_steps + 1}, d), got {np.shape(self.values)}"
            )
        if not np.all(np.isfinite(v)):
            bad = int(np.argwhere(~np.isfinite(v))[0, 0])
            raise NumericalBlowup("non-finite path value", node=bad)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


@dataclass(frozen=True)
class RngSpec:
    """Counter-based seed derivation.

    A stream is identified by (tag, common index); inside a stream particle i
    owns a fixed-width slice of the Philox counter space, so any particle can be
    regenerated in isolation by advancing the counter, and the bytes produced do
    not depend on how particles are split across workers.
    """

    seed: int = DEFAULT_SEED
    scheme: str = "philox4x64-slice/box-muller"

    def __post_init__(self):
        if int(self.seed) != self.seed or self.seed < 0 or self.seed > _MASK64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def key(self, tag: int, common: int) -> np.ndarray:
        if common < 0 or common >= (1 << 48):
            raise ConfigError(f"common index out of range: {common}")
        return np.array([self.seed & _MASK64, (int(tag) << 48) | int(common)], dtype=np.uint64)

    def normals(self, tag: int, common: int, first: int, count: int, size: int,
                workers: int = 1) -> np.ndarray:
        """Standard normals for particles first..first+count-1, shape (count, size)."""
        if count == 0 or size == 0:
            return np.zeros((count, size))
        stride = 4 * ((size + 3) // 4)
        key = self.key(tag, common)

        def block(lo, hi):
            bg = np.random.Philox(key=key)
            bg.advance(int(first + lo) * stride // 4)
            raw = bg.random_raw((hi - lo) * stride).reshape(hi - lo, stride)
            u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
            r = np.sqrt(-2.0 * np.log(u[:, 0::2]))
            ang = 2.0 * np.pi * u[:, 1::2]
            z = np.empty_like(u)
            z[:, 0::2] = r * np.cos(ang)
            z[:, 1::2] = r * np.sin(ang)
            return z[:, :size]

        if workers <= 1 or count < 2 * workers:
            return block(0, count)
        edges = np.linspace(0, count, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(block, edges[:-1], edges[1:]))
        return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class NoiseBundle:
    """Brownian increments for R common realizations and M particles each.

    dW0 has shape (R, n, j0) and dW has shape (R, M, n, j).
    """

    grid: TimeGrid
    dW0: np.ndarray
    dW: np.ndarray
    seed: int
    scheme: str

    @property
    def R(self) -> int:
        return self.dW.shape[0]

    @property
    def M(self) -> int:
        return self.dW.shape[1]

    @property
    def common(self) -> np.ndarray:
        return _cumulate(self.dW0)

    @property
    def idiosyncratic(self) -> np.ndarray:
        return _cumulate(self.dW)

    def path(self, r: int, i: int) -> SamplePath:
        return SamplePath(self.grid, self.idiosyncratic[r, i])


def _cumulate(dW: np.ndarray) -> np.ndarray:
    W = np.zeros(dW.shape[:-2] + (dW.shape[-2] + 1, dW.shape[-1]))
    np.cumsum(dW, axis=-2, out=W[..., 1:, :])
    return W


def sample_brownian(grid: TimeGrid, dim: int, rng: RngSpec, particle: int = 0,
                    common: int = 0, tag: int = TAG_IDIO) -> SamplePath:
    if dim < 1:
        raise ConfigError("dim must be >= 1")
    z = rng.normals(tag, common, particle, 1, grid.n_steps * dim)[0]
    dW = z.reshape(grid.n_steps, dim) * np.sqrt(grid.h)
    return SamplePath(grid, _cumulate(dW))


def make_noise(grid: TimeGrid, R: int, M: int, j0: int, j: int, rng: RngSpec,
               workers: int = 1, tag_offset: int = 0) -> NoiseBundle:
    n, sq = grid.n_steps, np.sqrt(grid.h)
    dW0 = np.zeros((R, n, j0))
    dW = np.zeros((R, M, n, j))
    for r in range(R):
        if j0:
            dW0[r] = rng.normals(TAG_COMMON + tag_offset, r, 0, 1, n * j0)[0].reshape(n, j0) * sq
        if j:
            z = rng.normals(TAG_IDIO + tag_offset, r, 0, M, n * j, workers=workers)
            dW[r] = z.reshape(M, n, j) * sq
    return NoiseBundle(grid, dW0, dW, rng.seed, rng.scheme)


def euler_forward(drift: Callable, diffusion, x0, noise, grid: TimeGrid):
    """Euler-Maruyama: X_{k+1} = X_k + drift(t_k, X_k, k) h + diffusion dW_k.

    `noise` is a SamplePath or an array of Brownian path values with shape
    (..., n+1, j).  Returns a SamplePath when given one, else an array.
    """
    single = isinstance(noise, SamplePath)
    W = noise.values if single else np.asarray(noise, dtype=float)
    dW = np.diff(W, axis=-2)
    sig = np.atleast_2d(np.asarray(diffusion, dtype=float))
    x = np.array(x0, dtype=float)
    d = x.shape[-1]
    if sig.shape != (d, dW.shape[-1]):
        raise ConfigError(f"diffusion must have shape {(d, dW.shape[-1])}, got {sig.shape}")
    out = np.empty(x.shape[:-1] + (grid.n_steps + 1, d))
    out[..., 0, :] = x
    h = grid.h
    for k in range(grid.n_steps):
        b = np.asarray(drift(grid.t[k], x, k), dtype=float)
        if not np.all(np.isfinite(b)):
            raise NumericalBlowup(f"drift returned a non-finite value at node {k}", node=k)
        x = x + b * h + dW[..., k, :] @ sig.T
        out[..., k + 1, :] = x
    return SamplePath(grid, out) if single else out


# ---------------------------------------------------------------------------
# Conditional expectations


def poly_features(z: np.ndarray, degree: int = 2) -> np.ndarray:
    """Monomials of total degree <= degree (degree 0, 1 or 2) in the last axis."""
    cols = [np.ones(z.shape[:-1] + (1,))]
    if degree >= 1:
        cols.append(z)
    if degree >= 2:
        d = z.shape[-1]
        idx = np.array(list(combinations_with_replacement(range(d), 2)), dtype=int).reshape(-1, 2)
        cols.append(z[..., idx[:, 0]] * z[..., idx[:, 1]])
    return np.concatenate(cols, axis=-1)


@dataclass(frozen=True)
class PolyFit:
    """Least-squares fit of a quantity on polynomial features of the state."""

    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    degree: int
    n_linear: int = 0

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """x: (..., d) states -> (..., q) fitted values."""
        return _features((x - self.mean) / self.scale, self.degree, self.n_linear) @ self.coef


def _features(z, degree, n_linear):
    if not n_linear:
        return poly_features(z, degree)
    return np.concatenate([poly_features(z[..., :-n_linear], degree), z[..., -n_linear:]], axis=-1)


class DeterministicConditioner:
    """E[. | F_k] is the identity when no noise enters the system."""

    stochastic = False

    def expect(self, k: int, values: np.ndarray) -> np.ndarray:
        return values

    def fit(self, k: int, values: np.ndarray):
        return None


class RegressionConditioner:
    """E[. | F_k] by polynomial least squares on the state at node k.

    The fit pools every particle of every common realization.  When common
    noise is present the caller appends F0-measurable features (leader state,
    conditional means) as the last `n_linear` columns of `states`.  They enter
    linearly only: with few common paths, richer functions of them would
    nearly interpolate per-path means and leak the current common increment.
    """

    stochastic = True

    def __init__(self, states: np.ndarray, degree: int = 2, n_linear: int = 0):
        if states.ndim < 3:
            raise ConfigError("regression states must have shape (..., n+1, d)")
        if not 0 <= n_linear < states.shape[-1]:
            raise ConfigError("n_linear must leave at least one polynomial column")
        self.states = states
        # node-major copy: every fit reads one contiguous (particles, d) block
        self._nodes = np.ascontiguousarray(np.moveaxis(states, -2, 0)).reshape(
            states.shape[-2], -1, states.shape[-1])
        self.degree = degree
        self.n_linear = n_linear

    def fit_values(self, k: int, values: np.ndarray) -> tuple[PolyFit, np.ndarray]:
        """Fit at node k and return the fitted values at the node-k states."""
        x = self._nodes[k]
        mean = x.mean(axis=0)
        std = np.sqrt(np.mean((x - mean) ** 2, axis=0))
        scale = np.where(std > 1e-8 * (1.0 + np.abs(mean)), std, 1.0)
        F = _features((x - mean) / scale, self.degree, self.n_linear)
        v = values.reshape(x.shape[0], -1)
        # a tiny ridge keeps the fit continuous in the states; plain lstsq
        # switches rank between nearby iterates when features are nearly collinear
        A = F.T @ F
        A[np.diag_indices_from(A)] += 1e-10 * (np.trace(A) / A.shape[0] + 1.0)
        coef = np.linalg.solve(A, F.T @ v)
        return PolyFit(mean, scale, coef, self.degree, self.n_linear), (F @ coef).reshape(values.shape)

    def fit(self, k: int, values: np.ndarray) -> PolyFit:
        return self.fit_values(k, values)[0]

    def expect(self, k: int, values: np.ndarray) -> np.ndarray:
        return self.fit_values(k, values)[1]


@dataclass
class BackwardSolution:
    Y: np.ndarray
    Y_next: np.ndarray
    L0: np.ndarray
    L1: np.ndarray
    fits: list | None = None


def backward_sweep(generator: Callable, terminal, grid: TimeGrid,
                   conditioning="deterministic", dW0=None, dW1=None,
                   keep_fits: bool = False) -> BackwardSolution:
    """Explicit backward Euler for -dY = f dt - L0 dW0 - L1 dW1.

    With Y_next_k = E[Y_{k+1} | F_k] the step is Y_k = Y_next_k + h f(k, Y_next_k).
    The integrands are L_k = E[Y_{k+1} dW_k^T | F_k] / h.  `terminal` holds
    Y(T) with shape (..., m); `generator(k, y_next)` returns an array of the
    same shape.
    """
    yT = np.asarray(terminal, dtype=float)
    n, h = grid.n_steps, grid.h
    stochastic = (dW0 is not None and dW0.shape[-1] > 0) or (dW1 is not None and dW1.shape[-1] > 0)
    if conditioning is None or conditioning == "deterministic":
        if stochastic:
            raise ConfigError("a stochastic backward sweep needs an ensemble conditioner")
        cond = DeterministicConditioner()
    else:
        cond = conditioning
    m = yT.shape[-1]
    j0 = 0 if dW0 is None else dW0.shape[-1]
    j1 = 0 if dW1 is None else dW1.shape[-1]
    Y = np.empty(yT.shape[:-1] + (n + 1, m))
    Yn = np.empty_like(Y)
    L0 = np.zeros(yT.shape[:-1] + (n, m, j0))
    L1 = np.zeros(yT.shape[:-1] + (n, m, j1))
    Y[..., n, :] = yT
    Yn[..., n, :] = yT
    fits = [None] * (n + 1) if keep_fits else None
    y = yT
    for k in range(n - 1, -1, -1):
        if cond.stochastic:
            blocks = [y]
            if j0:
                w0 = _expand_common(dW0[..., k, :], y)
                blocks.append((y[..., :, None] * w0[..., None, :]).reshape(y.shape[:-1] + (m * j0,)))
            if j1:
                w1 = dW1[..., k, :]
                blocks.append((y[..., :, None] * w1[..., None, :]).reshape(y.shape[:-1] + (m * j1,)))
            stacked = np.concatenate(blocks, axis=-1)
            fit, fitted = cond.fit_values(k, stacked)
            y_next = fitted[..., :m]
            if keep_fits:
                fits[k] = PolyFit(fit.mean, fit.scale, fit.coef[..., :m], fit.degree, fit.n_linear)
            off = m
            if j0:
                L0[..., k, :, :] = fitted[..., off:off + m * j0].reshape(y.shape[:-1] + (m, j0)) / h
                off += m * j0
            if j1:
                L1[..., k, :, :] = fitted[..., off:off + m * j1].reshape(y.shape[:-1] + (m, j1)) / h
        else:
            y_next = y
        f = np.asarray(generator(k, y_next), dtype=float)
        if not np.all(np.isfinite(f)):
            raise NumericalBlowup(f"backward generator non-finite at node {k}", node=k)
        y = y_next + h * f
        Y[..., k, :] = y
        Yn[..., k, :] = y_next
    return BackwardSolution(Y, Yn, L0, L1, fits)


def _expand_common(w0: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast a (R, j0) common increment against (R, M, m) particle values."""
    if w0.ndim == like.ndim - 1:
        w0 = w0[:, None, :]
    return np.broadcast_to(w0, like.shape[:-1] + (w0.shape[-1],))


def l2_time_norm(a: np.ndarray, grid: TimeGrid) -> float:
    """sqrt(E sum_k h |a_k|^2) over nodes 0..n-1; the particle axes are averaged."""
    sq = np.sum(a[..., : grid.n_steps, :] ** 2, axis=(-1, -2)) * grid.h
    return float(np.sqrt(np.mean(sq)))
