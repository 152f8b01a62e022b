"""Fully coupled conditional mean-field FBSDEs.

    dX  = Psi(t, X, Y, Xh, Yh) dt + theta0 dW0 + theta1 dW1,     X(0) = chi0
    -dY = [D(t, X, Y, Xh, Yh) + E[M(...) | F0]] dt - L0 dW0 - L1 dW1,  Y(T) = h(X(T))

where Xh = E[X | F0_t] and Yh = E[Y | F0_t].

Discretization (used everywhere in the package).  With Yn_k = E[Y_{k+1} | F_k]:

    X_{k+1} = X_k + h Psi(t_k, X_k, Yn_k, ...) + theta dW_k
    Y_k     = Yn_k + h (D + E[M | F0])(t_k, X_k, Yn_k, ...)

Both equations read the pair (X_k, Yn_k).  On deterministic problems Yn_k =
Y_{k+1}, and the adjoint of this scheme has the same form, so discrete
gradients computed through it are exact.

Solvers iterate a map that freezes the coupling at the previous iterate and
solves a decoupled system whose only coupling is the linear term -beta G^T Y
(branch "lambda", n1 >= m1) or beta G X (branch "tau", n1 < m1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from .errors import ConfigError, DivergenceError, NumericalBlowup, OracleDomainError
from .numerics import NoiseBundle, RegressionConditioner, TimeGrid, backward_sweep


@dataclass(frozen=True)
class FbsdeProblem:
    """Coefficients of a conditional mean-field FBSDE.

    psi, D and M are called as f(t, k, X, Y, Xh, Yh) where t and k are 1-D
    arrays of K node times/indices, X has shape (R, M, K, n1), Y has shape
    (R, M, K, m1) and the conditional means have a singleton particle axis.
    h(XT, XhT) maps (R, M, n1) terminal states to (R, M, m1).

    `regressors` (R, M, n+1, d) marks a system whose coefficients are random
    (frozen along simulated paths) even if theta0 = theta1 = 0: conditional
    expectations then regress on these F_k-measurable features instead of X.
    Zero theta matrices still fix the noise dimensions used for L0, L1.
    """

    n1: int
    m1: int
    psi: Callable
    D: Callable
    h: Callable
    M: Callable | None = None
    theta0: np.ndarray | None = None
    theta1: np.ndarray | None = None
    chi0: np.ndarray | None = None
    G: np.ndarray | None = None
    beta: float = 1.0
    branch: str | None = None
    name: str = ""
    regressors: np.ndarray | None = None

    def __post_init__(self):
        th0 = np.zeros((self.n1, 0)) if self.theta0 is None else np.asarray(self.theta0, float)
        th1 = np.zeros((self.n1, 0)) if self.theta1 is None else np.asarray(self.theta1, float)
        if th0.ndim != 2 or th0.shape[0] != self.n1 or th1.ndim != 2 or th1.shape[0] != self.n1:
            raise ConfigError(f"{self.name}: theta0/theta1 must have n1={self.n1} rows")
        object.__setattr__(self, "theta0", th0)
        object.__setattr__(self, "theta1", th1)
        chi = np.zeros(self.n1) if self.chi0 is None else np.asarray(self.chi0, float)
        if chi.shape[-1] != self.n1:
            raise ConfigError(f"{self.name}: chi0 must end in dimension n1={self.n1}")
        object.__setattr__(self, "chi0", chi)
        G = np.eye(self.m1, self.n1) if self.G is None else np.asarray(self.G, float)
        if G.shape != (self.m1, self.n1):
            raise ConfigError(f"{self.name}: G must be {self.m1} x {self.n1}")
        if np.linalg.matrix_rank(G) < min(self.m1, self.n1):
            raise ConfigError(f"{self.name}: coupling matrix G is rank deficient")
        object.__setattr__(self, "G", G)
        br = self.branch or ("lambda" if self.n1 >= self.m1 else "tau")
        if br not in ("lambda", "tau"):
            raise ConfigError(f"unknown continuation branch {br!r}")
        object.__setattr__(self, "branch", br)

    @property
    def j0(self) -> int:
        return self.theta0.shape[1]

    @property
    def j(self) -> int:
        return self.theta1.shape[1]

    @property
    def stochastic(self) -> bool:
        return bool(np.any(self.theta0) or np.any(self.theta1)) or self.regressors is not None


@dataclass
class FbsdeSolution:
    """Adapted solution on a grid.  Y_next[..., k, :] = E[Y_{k+1} | F_k]."""

    grid: TimeGrid
    X: np.ndarray
    Y: np.ndarray
    Y_next: np.ndarray
    L0: np.ndarray
    L1: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def copy(self) -> "FbsdeSolution":
        return FbsdeSolution(self.grid, self.X.copy(), self.Y.copy(), self.Y_next.copy(),
                             self.L0.copy(), self.L1.copy(), dict(self.diagnostics))


@dataclass(frozen=True)
class ContinuationSchedule:
    """Stage ladder 0 = lambda_0 < ... < lambda_K = 1.

    With lambdas=None the ladder is adaptive: widths start at delta0 and are
    halved whenever a stage fails to contract.
    """

    lambdas: tuple | None = None
    tol: float = 1e-10
    max_iter: int = 200
    delta0: float = 0.5
    min_delta: float = 1.0 / 1024
    inner_damping: float = 0.5
    inner_max_iter: int = 2000

    def __post_init__(self):
        if self.lambdas is not None:
            lam = np.asarray(self.lambdas, float)
            if lam.ndim != 1 or lam.size < 2 or lam[0] != 0.0 or lam[-1] != 1.0:
                raise ConfigError("schedule must start at 0 and end at 1")
            if np.any(np.diff(lam) <= 0):
                raise ConfigError("schedule must be strictly increasing")
            if np.max(np.diff(lam)) > self.delta0 + 1e-15 and self.delta0 < 1.0:
                raise ConfigError("schedule width exceeds delta0")

    @classmethod
    def uniform(cls, stages: int, **kw) -> "ContinuationSchedule":
        lam = np.linspace(0.0, 1.0, stages + 1)
        lam[-1] = 1.0
        kw.setdefault("delta0", 1.0)
        return cls(tuple(float(x) for x in lam), **kw)


@dataclass
class MonotonicityReport:
    values: np.ndarray
    beta11: float
    beta21: float
    beta12: float
    beta22: float
    alpha11: float
    passed: bool
    flags: list
    witness: dict | None
    note: str = ("sampled check: a pass is evidence on the sampled pairs, "
                 "not a proof of the monotonicity condition")


# ---------------------------------------------------------------------------
# helpers


class _Context:
    def __init__(self, problem: FbsdeProblem, grid: TimeGrid, noise: NoiseBundle | None,
                 degree: int = 2):
        self.problem = problem
        self.grid = grid
        n = grid.n_steps
        if noise is None:
            if problem.stochastic:
                raise ConfigError(f"{problem.name}: stochastic problem needs a NoiseBundle")
            R = 1
            M = 1 if problem.chi0.ndim == 1 else problem.chi0.shape[1]
            R = 1 if problem.chi0.ndim == 1 else problem.chi0.shape[0]
            self.dW0 = np.zeros((R, n, problem.j0))
            self.dW = np.zeros((R, M, n, problem.j))
        else:
            if noise.grid != grid:
                raise ConfigError("noise grid differs from solver grid")
            if noise.dW0.shape[-1] != problem.j0 or noise.dW.shape[-1] != problem.j:
                raise ConfigError("noise dimensions do not match theta0/theta1")
            self.dW0, self.dW = noise.dW0, noise.dW
        self.R, self.M = self.dW.shape[0], self.dW.shape[1]
        self.stochastic = problem.stochastic
        self.degree = degree
        chi = problem.chi0
        self.chi0 = np.broadcast_to(chi if chi.ndim == 3 else chi.reshape((1, 1, -1)),
                                    (self.R, self.M, problem.n1)).astype(float)
        self.noise_inc = (np.einsum("rkj,nj->rkn", self.dW0, problem.theta0)[:, None]
                          + np.einsum("rmkj,nj->rmkn", self.dW, problem.theta1))
        self.k = np.arange(n)
        self.t = grid.t[:n]

    def zeros(self):
        p, n = self.problem, self.grid.n_steps
        R, M = self.R, self.M
        return FbsdeSolution(self.grid, np.zeros((R, M, n + 1, p.n1)), np.zeros((R, M, n + 1, p.m1)),
                             np.zeros((R, M, n + 1, p.m1)), np.zeros((R, M, n, p.m1, p.j0)),
                             np.zeros((R, M, n, p.m1, p.j)))

    def conditioner(self, X):
        if self.problem.regressors is not None:
            X = self.problem.regressors
        if self.problem.j0 and self.R > 1:
            Xh = np.broadcast_to(X.mean(axis=1, keepdims=True), X.shape)
            return RegressionConditioner(np.concatenate([X, Xh], axis=-1), self.degree, X.shape[-1])
        return RegressionConditioner(X, self.degree)


def _coefficients(ctx: _Context, U: FbsdeSolution):
    """Psi, D + E[M|F0] at nodes 0..n-1 and h at the terminal node, all at U."""
    p, n = ctx.problem, ctx.grid.n_steps
    X = U.X[:, :, :n]
    Yn = U.Y_next[:, :, :n]
    Xh = X.mean(axis=1, keepdims=True)
    Yh = Yn.mean(axis=1, keepdims=True)
    psi = np.broadcast_to(p.psi(ctx.t, ctx.k, X, Yn, Xh, Yh), X.shape)
    D = np.broadcast_to(p.D(ctx.t, ctx.k, X, Yn, Xh, Yh), Yn.shape)
    if p.M is not None:
        D = D + np.broadcast_to(p.M(ctx.t, ctx.k, X, Yn, Xh, Yh), Yn.shape).mean(axis=1, keepdims=True)
    XT = U.X[:, :, n]
    hT = np.broadcast_to(p.h(XT, XT.mean(axis=1, keepdims=True)), XT.shape[:-1] + (p.m1,))
    return psi, D, hT


def _sources(ctx: _Context, U: FbsdeSolution, lam: float):
    """Frozen sources that turn the decoupled base system into the lam-system."""
    p, n = ctx.problem, ctx.grid.n_steps
    psi, D, hT = _coefficients(ctx, U)
    if p.branch == "lambda":
        fwd = lam * (p.beta * U.Y_next[:, :, :n] @ p.G + psi)
        return fwd, lam * D, lam * hT
    X = U.X[:, :, :n]
    XT = U.X[:, :, n]
    return lam * psi, lam * (D - p.beta * X @ p.G.T), lam * (hT - XT @ p.G.T)


def _reverse_cumsum(a):
    return np.cumsum(a[..., ::-1, :], axis=-2)[..., ::-1, :]


def _backward(ctx, terminal, gen_src, regress_on):
    """Y_k = E[Y_{k+1}|F_k] + h gen_src_k with terminal value `terminal`."""
    n, h = ctx.grid.n_steps, ctx.grid.h
    if not ctx.stochastic:
        Y = np.empty(terminal.shape[:-1] + (n + 1, terminal.shape[-1]))
        Y[..., n, :] = terminal
        Y[..., :n, :] = terminal[..., None, :] + h * _reverse_cumsum(gen_src)
        Yn = np.empty_like(Y)
        Yn[..., :n, :] = Y[..., 1:, :]
        Yn[..., n, :] = terminal
        R, M, _, m1 = Y.shape
        return Y, Yn, np.zeros((R, M, n, m1, ctx.problem.j0)), np.zeros((R, M, n, m1, ctx.problem.j))
    cond = ctx.conditioner(regress_on)
    bs = backward_sweep(lambda k, yn: gen_src[:, :, k], terminal, ctx.grid, cond,
                        dW0=ctx.dW0 if ctx.problem.j0 else None,
                        dW1=ctx.dW if ctx.problem.j else None)
    L0 = bs.L0 if ctx.problem.j0 else np.zeros(bs.Y.shape[:-2] + (n, bs.Y.shape[-1], 0))
    L1 = bs.L1 if ctx.problem.j else np.zeros(bs.Y.shape[:-2] + (n, bs.Y.shape[-1], 0))
    return bs.Y, bs.Y_next, L0, L1


def _forward(ctx, drift):
    X = np.empty(ctx.chi0.shape[:-1] + (ctx.grid.n_steps + 1, ctx.chi0.shape[-1]))
    X[..., 0, :] = ctx.chi0
    X[..., 1:, :] = ctx.chi0[..., None, :] + np.cumsum(ctx.grid.h * drift + ctx.noise_inc, axis=-2)
    return X


def _base_solve(ctx: _Context, fwd, bwd, term, frozen_X):
    """Solve the decoupled lam = 0 system driven by the given sources."""
    p, n = ctx.problem, ctx.grid.n_steps
    if p.branch == "lambda":
        Y, Yn, L0, L1 = _backward(ctx, term, bwd, frozen_X)
        X = _forward(ctx, fwd - p.beta * Yn[:, :, :n] @ p.G)
    else:
        X = _forward(ctx, fwd)
        terminal = X[:, :, n] @ p.G.T + term
        Y, Yn, L0, L1 = _backward(ctx, terminal, p.beta * X[:, :, :n] @ p.G.T + bwd, X)
    sol = FbsdeSolution(ctx.grid, X, Y, Yn, L0, L1)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        bad = np.argwhere(~np.isfinite(X).all(axis=(0, 1, 3)))
        raise NumericalBlowup("non-finite iterate", node=int(bad[0, 0]) if bad.size else None)
    return sol


def norm38(U: FbsdeSolution, V: FbsdeSolution) -> float:
    """sqrt(E sum_k h (|dX|^2 + |dY|^2 + |dL0|^2 + |dL1|^2) + E |dX(T)|^2)."""
    g = U.grid
    n, h = g.n_steps, g.h

    def sq(a):
        return np.sum(a.reshape(a.shape[0], a.shape[1], -1) ** 2, axis=-1)

    s = (sq(U.X[:, :, :n] - V.X[:, :, :n]) + sq(U.Y[:, :, :n] - V.Y[:, :, :n])
         + sq(U.L0 - V.L0) + sq(U.L1 - V.L1)) * h + sq(U.X[:, :, n] - V.X[:, :, n])
    return float(np.sqrt(np.mean(s)))


def _blend(U: FbsdeSolution, V: FbsdeSolution, w: float) -> FbsdeSolution:
    if w == 1.0:
        return V
    a = 1.0 - w
    return FbsdeSolution(U.grid, a * U.X + w * V.X, a * U.Y + w * V.Y, a * U.Y_next + w * V.Y_next,
                         a * U.L0 + w * V.L0, a * U.L1 + w * V.L1)


def _add(s1, s2):
    if s2 is None:
        return s1
    return tuple(a + b for a, b in zip(s1, s2))


def _contraction_stats(dist, window: int = 5):
    """(contraction factor, mean rate) of a successive-distance history.

    The factor is the worst geometric-mean ratio over windows of `window`
    steps.  Single-step ratios are not used because oscillatory convergence
    (complex eigenvalues of the linearized map) makes them exceed one even
    when the iteration contracts.  The first transient step and distances at
    the round-off floor are ignored.
    """
    d = np.asarray(dist, float)
    if d.size < 3:
        return None, None
    floor = max(1e-13, 1e-10 * d[0])
    last = 1
    while last + 1 < d.size and d[last + 1] > floor:
        last += 1
    seg = np.log(np.maximum(d[1:last + 1], 1e-300))
    if seg.size < 2:
        r = float(d[-1] / max(d[-2], 1e-300))
        return r, r
    w = min(window, seg.size - 1)
    rates = (seg[w:] - seg[:-w]) / w
    geo = (seg[-1] - seg[0]) / (seg.size - 1)
    return float(np.exp(rates.max())), float(np.exp(geo))


def _max_step_ratio(dist):
    d = np.asarray(dist, float)
    if d.size < 2:
        return None
    return float(np.max(d[1:] / np.maximum(d[:-1], 1e-300)))


def _iterate(ctx, U, lam, extra, damping, tol, max_iter, label):
    dist = []
    if lam == 0.0:
        fwd, bwd, term = extra
        V = _base_solve(ctx, fwd, bwd, term, U.X)
        dist.append(norm38(V, U))
        return V, dist, True
    for it in range(max_iter):
        fwd, bwd, term = _add(_sources(ctx, U, lam), extra)
        V = _blend(U, _base_solve(ctx, fwd, bwd, term, U.X), damping)
        d = norm38(V, U)
        dist.append(d)
        U = V
        if not np.isfinite(d) or (len(dist) > 5 and d > 1e6 * max(dist[0], 1e-300)):
            mx, _ = _contraction_stats(dist)
            raise DivergenceError(f"{label}: iterates diverge", contraction=mx, distances=dist[-5:])
        if d <= tol:
            return U, dist, True
    return U, dist, False


def _finish(ctx, U, dist, extra_diag):
    mx, geo = _contraction_stats(dist)
    U.diagnostics.update({"iterations": len(dist), "distances": [float(x) for x in dist],
                          "contraction_factor": mx, "mean_contraction": geo,
                          "max_step_ratio": _max_step_ratio(dist)})
    U.diagnostics.update(extra_diag)
    U.diagnostics["residual"] = {k: v for k, v in solution_residual(ctx.problem, U, ctx.grid, ctx).items()
                                 if not isinstance(v, np.ndarray)}
    return U


def seed_solution(problem: FbsdeProblem, grid: TimeGrid, noise: NoiseBundle | None = None,
                  degree: int = 2) -> FbsdeSolution:
    """The lam = 0 stage with zero sources: Y = 0 (or the tau analogue) and X driven by noise."""
    ctx = _Context(problem, grid, noise, degree)
    Z = ctx.zeros()
    z = _sources(ctx, Z, 0.0)
    return _base_solve(ctx, *z, Z.X)


def random_guess(problem: FbsdeProblem, grid: TimeGrid, noise: NoiseBundle | None, seed: int,
                 scale: float = 1.0) -> FbsdeSolution:
    ctx = _Context(problem, grid, noise)
    U = ctx.zeros()
    gen = np.random.default_rng(seed)
    U.X = scale * gen.standard_normal(U.X.shape)
    U.X[:, :, 0] = ctx.chi0
    U.Y = scale * gen.standard_normal(U.Y.shape)
    U.Y_next = U.Y.copy()
    return U


def solve_picard(problem: FbsdeProblem, grid: TimeGrid, noise: NoiseBundle | None = None,
                 guess: FbsdeSolution | None = None, damping: float = 0.5, tol: float = 1e-10,
                 max_iter: int = 1000, degree: int = 2) -> FbsdeSolution:
    """Damped fixed-point iteration of the frozen-coupling map on the full system.

    Convergence is measured in the time-integrated squared norm of
    (X, Y, L0, L1) plus the terminal X defect; the history and the largest
    successive-distance ratio are stored in the diagnostics.
    """
    if not 0.0 < damping <= 1.0:
        raise ConfigError("damping must lie in (0, 1]")
    ctx = _Context(problem, grid, noise, degree)
    U = guess.copy() if guess is not None else seed_solution(problem, grid, noise, degree)
    U, dist, ok = _iterate(ctx, U, 1.0, None, damping, tol, max_iter, problem.name or "picard")
    if not ok:
        mx, _ = _contraction_stats(dist)
        raise DivergenceError(f"{problem.name or 'picard'}: no convergence in {max_iter} iterations",
                              contraction=mx, last_distance=dist[-1])
    return _finish(ctx, U, dist, {"method": "picard", "damping": damping})


def _stage(ctx, U, lam0, delta, sched, label):
    """Outer iteration of one continuation stage: each step solves the lam0-system
    with the remaining coupling (width delta) frozen at the previous iterate."""
    dist = []
    inner_its = 0
    for it in range(sched.max_iter):
        # inexact inner solves: tighten with the outer distance
        inner_tol = max(sched.tol * 1e-2, 1e-3 * dist[-1]) if dist else 1e-4
        ext = tuple(delta * s for s in _sources(ctx, U, 1.0))
        V, inner, ok = _iterate(ctx, U, lam0, ext, sched.inner_damping, inner_tol,
                                sched.inner_max_iter, label)
        inner_its += len(inner)
        if not ok:
            return U, dist, False, inner_its
        d = norm38(V, U)
        dist.append(d)
        U = V
        if not np.isfinite(d):
            return U, dist, False, inner_its
        if len(dist) >= 4 and all(dist[-i] > dist[-i - 1] for i in (1, 2, 3)):
            return U, dist, False, inner_its
        if d <= sched.tol:
            return U, dist, True, inner_its
    return U, dist, False, inner_its


def solve_continuation(problem: FbsdeProblem, grid: TimeGrid,
                       schedule: ContinuationSchedule | None = None,
                       noise: NoiseBundle | None = None, degree: int = 2) -> FbsdeSolution:
    """Method of continuation from the decoupled lam = 0 system to lam = 1."""
    sched = schedule or ContinuationSchedule()
    ctx = _Context(problem, grid, noise, degree)
    U = seed_solution(problem, grid, noise, degree)
    ladder = []
    all_dist = []
    if sched.lambdas is not None:
        lams = list(sched.lambdas)
        for i in range(len(lams) - 1):
            lam0, delta = lams[i], lams[i + 1] - lams[i]
            U, dist, ok, inner = _stage(ctx, U, lam0, delta, sched, problem.name)
            mx, geo = _contraction_stats(dist) if len(dist) >= 3 else (None, None)
            ladder.append({"stage": i, "lambda0": lam0, "lambda1": lams[i + 1], "iterations": len(dist),
                           "inner_iterations": inner, "contraction_factor": mx, "mean_contraction": geo})
            all_dist += dist
            if not ok:
                raise DivergenceError(f"{problem.name}: continuation stage {i} "
                                      f"[{lam0:.4g}, {lams[i + 1]:.4g}] diverged; use a finer schedule",
                                      stage=i, ladder=ladder)
    else:
        lam0, delta, i = 0.0, min(sched.delta0, 1.0), 0
        while lam0 < 1.0:
            delta = min(delta, 1.0 - lam0)
            U_try, dist, ok, inner = _stage(ctx, U, lam0, delta, sched, problem.name)
            if not ok:
                if delta / 2 < sched.min_delta:
                    raise DivergenceError(f"{problem.name}: stage at lambda={lam0:.4g} diverged even "
                                          f"at width {delta:.3g}; use a finer schedule",
                                          stage=i, ladder=ladder)
                ladder.append({"stage": i, "lambda0": lam0, "lambda1": lam0 + delta,
                               "iterations": len(dist), "rejected": True})
                delta /= 2
                continue
            mx, geo = _contraction_stats(dist) if len(dist) >= 3 else (None, None)
            lam1 = 1.0 if lam0 + delta >= 1.0 - 1e-15 else lam0 + delta
            ladder.append({"stage": i, "lambda0": lam0, "lambda1": lam1, "iterations": len(dist),
                           "inner_iterations": inner, "contraction_factor": mx, "mean_contraction": geo})
            all_dist += dist
            U, lam0, i = U_try, lam1, i + 1
    accepted = [s for s in ladder if not s.get("rejected")]
    factors = [s["contraction_factor"] for s in accepted if s["contraction_factor"] is not None]
    U = _finish(ctx, U, all_dist, {"method": "continuation", "ladder": ladder})
    U.diagnostics["contraction_factor"] = max(factors) if factors else None
    return U


def stage_contraction(problem: FbsdeProblem, grid: TimeGrid, delta: float, lam0: float = 0.0,
                      noise: NoiseBundle | None = None, tol: float = 1e-11,
                      start: FbsdeSolution | None = None) -> dict:
    """Measured successive-distance ratio of one stage map of width delta."""
    ctx = _Context(problem, grid, noise)
    U = start.copy() if start is not None else seed_solution(problem, grid, noise)
    sched = ContinuationSchedule(tol=tol, max_iter=500)
    _, dist, ok, _ = _stage(ctx, U, lam0, delta, sched, problem.name)
    mx, geo = _contraction_stats(dist)
    return {"delta": delta, "lambda0": lam0, "ratio": mx, "mean_ratio": geo, "converged": ok,
            "max_step_ratio": _max_step_ratio(dist), "distances": dist}


def fit_stage_constant(problem: FbsdeProblem, grid: TimeGrid, widths=(0.5, 0.25, 0.125),
                       noise: NoiseBundle | None = None) -> dict:
    """Fit K in ratio <= K delta (1 + ratio) from probe stages started at lam = 0."""
    probes = [stage_contraction(problem, grid, w, noise=noise) for w in widths]
    Ks = [p["ratio"] / (p["delta"] * (1.0 + p["ratio"])) for p in probes if p["ratio"] is not None]
    K = max(Ks)
    return {"K": K, "delta_star": 1.0 / (3.0 * K), "probes": probes}


# ---------------------------------------------------------------------------
# diagnostics


def solution_residual(problem: FbsdeProblem, sol: FbsdeSolution, grid: TimeGrid,
                      noise=None) -> dict:
    """Per-node defects of the discrete equations.

    forward[k]     = |X_{k+1} - X_k - h Psi - theta dW_k|
    backward[k]    = |Y_k - Yn_k - h (D + E[M|F0])|          (local to node k)
    martingale[k]  = |Y_{k+1} - Yn_k - L0 dW0_k - L1 dW1_k|
    """
    if sol.grid != grid:
        raise ConfigError("solution and grid differ")
    ctx = noise if isinstance(noise, _Context) else _Context(problem, grid, noise)
    n, h = grid.n_steps, grid.h
    psi, D, hT = _coefficients(ctx, sol)
    fwd = sol.X[:, :, 1:] - sol.X[:, :, :n] - h * psi - ctx.noise_inc
    bwd = sol.Y[:, :, :n] - sol.Y_next[:, :, :n] - h * D
    w0 = np.broadcast_to(ctx.dW0[:, None], sol.L0.shape[:3] + (problem.j0,))
    mart = (sol.Y[:, :, 1:] - sol.Y_next[:, :, :n] - np.einsum("rmkij,rmkj->rmki", sol.L0, w0)
            - np.einsum("rmkij,rmkj->rmki", sol.L1, ctx.dW))
    f_node = np.linalg.norm(fwd, axis=-1).max(axis=(0, 1))
    b_node = np.linalg.norm(bwd, axis=-1).max(axis=(0, 1))
    m_node = np.linalg.norm(mart, axis=-1).max(axis=(0, 1))
    term = np.linalg.norm(sol.Y[:, :, n] - hT, axis=-1)
    init = np.linalg.norm(sol.X[:, :, 0] - ctx.chi0, axis=-1)
    return {"forward_max": float(f_node.max()), "backward_max": float(b_node.max()),
            "martingale_max": float(m_node.max()),
            "forward_l2": float(np.sqrt(np.mean(np.sum(fwd ** 2, axis=(-1, -2))))),
            "backward_l2": float(np.sqrt(np.mean(np.sum(bwd ** 2, axis=(-1, -2))))),
            "terminal_max": float(term.max()), "initial_max": float(init.max()),
            "forward_node": f_node, "backward_node": b_node, "martingale_node": m_node}


def _sample_clouds(problem, grid, gen, cloud, scale):
    k = int(gen.integers(0, grid.n_steps))
    shp = (1, cloud, 1)
    X = [scale * gen.standard_normal(shp + (problem.n1,)) for _ in range(2)]
    Y = [scale * gen.standard_normal(shp + (problem.m1,)) for _ in range(2)]
    return k, X, Y


def check_monotone(problem: FbsdeProblem, grid: TimeGrid, sampler: Callable | None = None,
                   samples: int = 200, seed: int = 0, cloud: int = 16, scale: float = 1.0,
                   tol: float = 1e-10) -> MonotonicityReport:
    """Sample the monotonicity bilinear form and fit the largest constants.

    Each sample is a pair of particle clouds at one node; conditional means are
    cloud means, so the form is evaluated in its integrated (averaged) version.
    `sampler(gen)` may replace the default and must return (k, [X1, X2], [Y1, Y2])
    with X arrays of shape (1, cloud, 1, n1).
    """
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    gen = np.random.default_rng(seed)
    G = problem.G
    rows, F, alphas = [], [], []
    wit = []
    for _ in range(samples):
        k, Xs, Ys = sampler(gen) if sampler else _sample_clouds(problem, grid, gen, cloud, scale)
        t = grid.t[k:k + 1]
        kk = np.array([k])
        vals = []
        for X, Y in zip(Xs, Ys):
            Xh, Yh = X.mean(axis=1, keepdims=True), Y.mean(axis=1, keepdims=True)
            psi = np.broadcast_to(problem.psi(t, kk, X, Y, Xh, Yh), X.shape)
            D = np.broadcast_to(problem.D(t, kk, X, Y, Xh, Yh), Y.shape)
            if problem.M is not None:
                D = D + np.broadcast_to(problem.M(t, kk, X, Y, Xh, Yh), Y.shape).mean(axis=1, keepdims=True)
            hv = np.broadcast_to(problem.h(X[:, :, 0], Xh[:, :, 0]), Y[:, :, 0].shape)
            vals.append((X, Y, Xh, Yh, psi, D, hv))
        (X1, Y1, Xh1, Yh1, p1, D1, h1), (X2, Y2, Xh2, Yh2, p2, D2, h2) = vals
        dX, dY, dXh, dYh = X1 - X2, Y1 - Y2, Xh1 - Xh2, Yh1 - Yh2
        form = np.mean(np.sum(-(D1 - D2) @ G * dX, axis=-1) + np.sum((p1 - p2) @ G.T * dY, axis=-1))
        q = [np.mean(np.sum((dX @ G.T) ** 2, -1)), float(np.sum((dXh @ G.T) ** 2)),
             np.mean(np.sum((dY @ G) ** 2, -1)), float(np.sum((dYh @ G) ** 2))]
        rows.append(q)
        F.append(form)
        gx = dX[:, :, 0] @ G.T
        den = np.mean(np.sum(gx ** 2, -1))
        alphas.append(np.mean(np.sum((h1 - h2) * gx, -1)) / den if den > 0 else np.inf)
        wit.append({"node": k, "form": float(form)})
    F = np.asarray(F)
    A = np.asarray(rows)
    flags = []
    witness = None
    bmax = np.max(np.abs(F)) + 1.0
    if np.any(F > tol * bmax):
        i = int(np.argmax(F))
        witness = wit[i]
        flags.append("bilinear form positive on a sampled pair")
        betas = np.zeros(4)
    else:
        res = linprog(-np.array([1.0, 1e-3, 1.0, 1e-3]), A_ub=A, b_ub=np.maximum(-F, 0.0),
                      bounds=[(0, 1e6)] * 4, method="highs")
        betas = res.x if res.success else np.zeros(4)
    alpha = float(np.min(alphas)) if alphas else 0.0
    if not np.isfinite(alpha):
        alpha = 0.0
    if alpha < -tol:
        flags.append("terminal condition violated")
        if witness is None:
            witness = wit[int(np.argmin(alphas))]
    b11, b21, b12, b22 = (float(b) for b in betas)
    if b11 + b12 <= tol:
        flags.append("beta11 + beta12 > 0 violated")
    if problem.n1 >= problem.m1:
        if b12 <= tol:
            flags.append("branch n1 >= m1 needs beta12 > 0")
    else:
        if b11 <= tol or alpha <= tol:
            flags.append("branch n1 < m1 needs beta11 > 0 and alpha11 > 0")
    return MonotonicityReport(F, b11, b21, b12, b22, alpha, not flags, flags, witness)


# ---------------------------------------------------------------------------
# LQ oracle and shipped test problems


@dataclass
class RiccatiOracle:
    """Y(t) = r(t) X(t) for dX = (aX - bY) dt, -dY = (aY + qX) dt, Y(T) = r_T X(T)."""

    grid: TimeGrid
    a: float
    b: float
    q: float
    r_T: float
    r: np.ndarray
    growth: np.ndarray

    def path(self, x0: float = 1.0):
        X = x0 * self.growth
        return X, self.r * X


def riccati_lq_oracle(a: float, b: float, q: float, r_T: float, grid: TimeGrid,
                      refine: int = 10) -> RiccatiOracle:
    """Integrate r' = -2ar + b r^2 - q backward by RK4 on a grid `refine` times finer,
    then X(t) = x0 exp(int_0^t (a - b r))."""
    nf = grid.n_steps * refine
    hf = grid.T / nf

    def f(r):
        return -2 * a * r + b * r * r - q

    r = np.empty(nf + 1)
    r[nf] = r_T
    for i in range(nf, 0, -1):
        y = r[i]
        k1 = f(y)
        k2 = f(y - 0.5 * hf * k1)
        k3 = f(y - 0.5 * hf * k2)
        k4 = f(y - hf * k3)
        r[i - 1] = y - hf * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        if not np.isfinite(r[i - 1]) or abs(r[i - 1]) > 1e12:
            raise OracleDomainError(f"Riccati solution blows up near t={(i - 1) * hf:.4g}")
    rate = a - b * r
    integ = np.concatenate([[0.0], np.cumsum(0.5 * hf * (rate[1:] + rate[:-1]))])
    return RiccatiOracle(grid, a, b, q, r_T, r[::refine].copy(), np.exp(integ[::refine]))


def lq_problem(a: float = 0.0, b: float = 1.0, q: float = 1.0, r_T: float = 1.0, x0: float = 1.0,
               theta1: float = 0.0, name: str = "lq") -> FbsdeProblem:
    """Scalar LQ FBSDE dX = (aX - bY) dt + theta1 dW, -dY = (aY + qX) dt, Y(T) = r_T X(T)."""
    return FbsdeProblem(
        n1=1, m1=1,
        psi=lambda t, k, X, Y, Xh, Yh: a * X - b * Y,
        D=lambda t, k, X, Y, Xh, Yh: a * Y + q * X,
        h=lambda XT, XhT: r_T * XT,
        theta1=np.array([[theta1]]) if theta1 else None,
        chi0=np.array([x0]), name=name)


def test_problem(name: str, n_steps: int = 100, particles: int = 64, commons: int = 8,
                 seed: int = 7):
    """Shipped monotone test problems: returns (problem, grid, noise)."""
    from .numerics import RngSpec, make_noise, make_grid

    grid = make_grid(1.0, n_steps)
    if name == "lq":
        return lq_problem(), grid, None
    if name == "beta-family":
        beta = 0.7
        G = np.array([[1.0, 0.3], [0.0, 1.0]])
        prob = FbsdeProblem(
            n1=2, m1=2, G=G, beta=beta,
            psi=lambda t, k, X, Y, Xh, Yh: -beta * Y @ G,
            D=lambda t, k, X, Y, Xh, Yh: beta * X @ G.T,
            h=lambda XT, XhT: XT @ G.T, chi0=np.array([1.0, -0.5]), name=name)
        return prob, grid, None
    if name == "tau-branch":
        G = np.array([[1.0], [0.5]])
        prob = FbsdeProblem(
            n1=1, m1=2, G=G, beta=1.0,
            psi=lambda t, k, X, Y, Xh, Yh: -0.5 * Y @ G,
            D=lambda t, k, X, Y, Xh, Yh: X @ G.T,
            h=lambda XT, XhT: XT @ G.T, chi0=np.array([1.0]), name=name)
        return prob, grid, None
    if name == "nonlinear":
        prob = FbsdeProblem(
            n1=1, m1=1,
            psi=lambda t, k, X, Y, Xh, Yh: -Y - 0.3 * np.tanh(Y),
            D=lambda t, k, X, Y, Xh, Yh: X + 0.3 * np.tanh(X),
            h=lambda XT, XhT: XT + 0.2 * np.tanh(XT), chi0=np.array([1.0]), name=name)
        return prob, grid, None
    if name == "conditional-lq":
        prob = FbsdeProblem(
            n1=1, m1=1,
            psi=lambda t, k, X, Y, Xh, Yh: -Y - 0.5 * Yh,
            D=lambda t, k, X, Y, Xh, Yh: X + 0.5 * Xh,
            h=lambda XT, XhT: XT, theta0=np.array([[0.2]]), theta1=np.array([[0.3]]),
            chi0=np.array([1.0]), name=name)
        noise = make_noise(grid, commons, particles, 1, 1, RngSpec(seed))
        return prob, grid, noise
    raise ConfigError(f"unknown test problem {name!r}")


SHIPPED_MONOTONE = ("lq", "beta-family", "tau-branch", "nonlinear", "conditional-lq")
