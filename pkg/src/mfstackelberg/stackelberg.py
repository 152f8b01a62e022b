"""Game-level solvers: follower maximum principle, leader state/variational/adjoint
systems, the leader gradient, projected descent and the consistency residual.

Discrete convention.  All systems use the explicit scheme of ``fbsde``: the
control (or coupling) at node k reads the adjoint value E[p_{k+1} | F_k], which
the solution objects store as ``p_next``.  With this convention the follower
condition dH1/du1 = 0 is the exact first-order condition of the discrete
problem, and the leader gradient below is the exact derivative of the discrete
leader cost (cost = sum_{k<n} h g(t_k, ...) + terminal).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DivergenceError, StallError
from .fbsde import FbsdeProblem, FbsdeSolution, solution_residual, solve_continuation, solve_picard
from .game import (GameSpec, LeaderCoefficients, assemble_leader_coefficients, follower_hamiltonian_u,
                   newton_stationarity, projected_gradient_residual)
from .numerics import (DEFAULT_SEED, TAG_INIT, NoiseBundle, PolyFit, RegressionConditioner, RngSpec,
                       TimeGrid, backward_sweep, make_noise)

_TAGS = ("deterministic", "common", "per-particle")


def _identity(u):
    return u


@dataclass
class ControlProfile:
    """Control values on the grid nodes.

    Shapes: (n+1, m) for deterministic profiles, (R, n+1, m) for profiles
    adapted to the common noise, (R, M, n+1, m) for per-particle profiles.
    The value at the last node never enters the Euler scheme.
    """

    values: np.ndarray
    adaptedness: str = "deterministic"
    project: Callable = _identity

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.adaptedness not in _TAGS:
            raise ConfigError(f"adaptedness must be one of {_TAGS}")
        want = {"deterministic": 2, "common": 3, "per-particle": 4}[self.adaptedness]
        if v.ndim != want:
            raise ConfigError(f"{self.adaptedness} control needs {want} axes, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ConfigError("control values must be finite")
        if np.max(np.abs(self.project(v) - v), initial=0.0) > 1e-12:
            raise ConfigError("control values lie outside the control set")
        self.values = v

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int, project: Callable = _identity) -> "ControlProfile":
        return cls(np.zeros((grid.n_steps + 1, m)), "deterministic", project)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def common_view(self) -> np.ndarray:
        """(R or 1, n+1, m) view for leader controls."""
        if self.adaptedness == "deterministic":
            return self.values[None]
        if self.adaptedness == "common":
            return self.values
        raise ConfigError("a per-particle profile has no common view")

    def l2(self, grid: TimeGrid) -> float:
        v = self.values[..., : grid.n_steps, :]
        return float(np.sqrt(np.mean(np.sum(v ** 2, axis=(-1, -2)) * grid.h)))


@dataclass(frozen=True)
class EnsembleConfig:
    """R common-noise realizations with M followers each; deterministic specs use 1 x 1."""

    R: int = 1
    M: int = 1
    seed: int = DEFAULT_SEED
    degree: int = 2
    workers: int = 1
    tag_offset: int = 0

    def __post_init__(self):
        if self.R < 1 or self.M < 1:
            raise ConfigError("ensemble sizes must be >= 1")

    def resolve(self, spec: GameSpec) -> "EnsembleConfig":
        if spec.deterministic and spec.xi0 is None and spec.xi1 is None:
            return EnsembleConfig(1, 1, self.seed, self.degree, self.workers, self.tag_offset)
        if spec.dims["j0"] == 0 and spec.xi0 is None and self.R != 1:
            return EnsembleConfig(1, self.M, self.seed, self.degree, self.workers, self.tag_offset)
        return self

    def noise(self, spec: GameSpec, grid: TimeGrid) -> NoiseBundle:
        d = spec.dims
        return make_noise(grid, self.R, self.M, d["j0"], d["j"], RngSpec(self.seed),
                          workers=self.workers, tag_offset=self.tag_offset)

    def initial_states(self, spec: GameSpec):
        gen = np.random.default_rng([self.seed, TAG_INIT + self.tag_offset])
        return spec.initial_leader(gen, self.R), spec.initial_followers(gen, (self.R, self.M))


def _u0_nodes(u0: ControlProfile, R: int) -> np.ndarray:
    v = u0.common_view()
    if v.shape[0] not in (1, R):
        raise ConfigError(f"leader control has {v.shape[0]} common paths, ensemble has {R}")
    return np.broadcast_to(v, (R,) + v.shape[1:])


def _alpha(spec: GameSpec, t, x1, x0, u0, z, p):
    if spec.has("alpha1"):
        return spec.project_u1(spec.call("alpha1", t, x1, x0, u0, z, p))
    # pointwise Newton fallback for specs without a closed-form map
    lead = np.broadcast_shapes(np.shape(t), x1.shape[:-1], x0.shape[:-1], u0.shape[:-1],
                               z.shape[:-1], p.shape[:-1])
    out = np.empty(lead + (spec.m,))
    tt = np.broadcast_to(t, lead)
    bx = [np.broadcast_to(a, lead + a.shape[-1:]) for a in (x1, x0, u0, z, p)]
    for idx in np.ndindex(*lead):
        out[idx] = newton_stationarity(spec, tt[idx], *(a[idx] for a in bx),
                                       starts=np.zeros((1, spec.m)))[0]
    return out


# ---------------------------------------------------------------------------
# Follower maximum principle


@dataclass
class FollowerMPSolution:
    """Representative-follower Hamiltonian system at a fixed leader control.

    x0: (R, n+1, k); x1, p, p_next: (R, M, n+1, n); l, q: martingale integrands
    against W0 and W1; z: (R, n+1, n) conditional mean of x1.
    """

    grid: TimeGrid
    u0: ControlProfile
    x0: np.ndarray
    x1: np.ndarray
    p: np.ndarray
    p_next: np.ndarray
    l: np.ndarray
    q: np.ndarray
    control: ControlProfile
    z: np.ndarray
    fits: list | None
    common_features: bool
    noise: NoiseBundle | None
    diagnostics: dict = field(default_factory=dict)

    def features(self, k: int, x1, x0, z):
        if not self.common_features:
            return x1
        return np.concatenate([x1, np.broadcast_to(x0, x1.shape[:-1] + x0.shape[-1:]),
                               np.broadcast_to(z, x1.shape)], axis=-1)

    def feedback(self, spec: GameSpec, k: int, x1, x0, z, u0k) -> np.ndarray:
        """Decentralized control at node k for limit-system states x1 (any leading shape).

        Uses the stored regression of E[p_{k+1} | F_k] on the node-k features, so
        controls can be generated for fresh noise paths.  On deterministic
        problems the stored open-loop value is returned.
        """
        if self.fits is None:
            return np.broadcast_to(self.control.values[0, 0, k], np.shape(x1)[:-1] + (spec.m,))
        pn = self.fits[k].evaluate(self.features(k, x1, x0, z))
        return _alpha(spec, self.grid.t[k], x1, x0, u0k, z, pn)


def _forward_followers(spec, grid, u0n, ctrl, x0i, x1i, noise):
    """Synchronized Euler pass of leader and followers with z = conditional mean."""
    n, h = grid.n_steps, grid.h
    R, M = x1i.shape[:2]
    d = spec.dims
    x0 = np.empty((R, n + 1, d["k"]))
    x1 = np.empty((R, M, n + 1, d["n"]))
    z = np.empty((R, n + 1, d["n"]))
    x0[:, 0], x1[:, :, 0] = x0i, x1i
    s0, s1 = spec.sigma0, spec.sigma
    for k in range(n):
        t = grid.t[k]
        zk = x1[:, :, k].mean(axis=1)
        z[:, k] = zk
        b0 = spec.call("b0", t, x0[:, k], u0n[:, k], zk)
        b1 = spec.call("b1", t, x1[:, :, k], ctrl[:, :, k], x0[:, None, k], u0n[:, None, k], zk[:, None])
        x0[:, k + 1] = x0[:, k] + h * b0
        x1[:, :, k + 1] = x1[:, :, k] + h * b1
        if noise is not None:
            if d["j0"]:
                x0[:, k + 1] += noise.dW0[:, k] @ s0.T
            if d["j"]:
                x1[:, :, k + 1] += noise.dW[:, :, k] @ s1.T
        if not (np.all(np.isfinite(x1[:, :, k + 1])) and np.all(np.isfinite(x0[:, k + 1]))):
            from .errors import NumericalBlowup
            raise NumericalBlowup(f"follower state non-finite at node {k + 1}", node=k + 1)
    z[:, n] = x1[:, :, n].mean(axis=1)
    return x0, x1, z


def _common_features(spec, ens):
    return spec.dims["j0"] > 0 and ens.R > 1


def _follower_backward(spec, grid, u0n, ctrl, x0, x1, z, noise, ens, keep_fits):
    n = grid.n_steps
    t = grid.t[:n]
    X1, X0 = x1[:, :, :n], x0[:, None, :n]
    U0, Z, C = u0n[:, None, :n], z[:, None, :n], ctrl[:, :, :n]
    # node-major so the generator reads contiguous blocks
    J = np.ascontiguousarray(np.moveaxis(spec.call("b1_x1", t, X1, C, X0, U0, Z), 2, 0))
    g = np.ascontiguousarray(np.moveaxis(spec.call("g1_x1", t, X1, C, X0, U0, Z), 2, 0))
    terminal = spec.call("G1_x1", x1[:, :, n])
    if noise is None:
        sweep = backward_sweep(lambda k, pn: np.einsum("...ij,...i->...j", J[k], pn) + g[k],
                               terminal, grid)
        return sweep, False
    cf = _common_features(spec, ens)
    if cf:
        feats = np.concatenate([x1, np.broadcast_to(x0[:, None], x1.shape[:2] + x0.shape[1:]),
                                np.broadcast_to(z[:, None], x1.shape)], axis=-1)
        cond = RegressionConditioner(feats, ens.degree, x0.shape[-1] + z.shape[-1])
    else:
        cond = RegressionConditioner(x1, ens.degree)
    d = spec.dims
    sweep = backward_sweep(lambda k, pn: np.einsum("...ij,...i->...j", J[k], pn) + g[k],
                           terminal, grid, cond,
                           dW0=noise.dW0 if d["j0"] else None, dW1=noise.dW if d["j"] else None,
                           keep_fits=keep_fits)
    return sweep, cf


def solve_follower_mp(u0: ControlProfile, spec: GameSpec, ensemble: EnsembleConfig | None,
                      grid: TimeGrid, tol: float = 1e-10, damping: float = 0.5,
                      max_iter: int = 500, guess: ControlProfile | None = None) -> FollowerMPSolution:
    """Fixed point on the follower control profile.

    Each iteration runs the states forward with z = conditional mean of the
    followers, solves the adjoint backward and updates the control through
    the stationarity map; the update is damped.  Stops when the undamped
    control change is <= tol in the discrete L2 norm.
    """
    if u0.adaptedness == "per-particle":
        raise ConfigError("the leader control must be deterministic or common-noise adapted")
    if not 0.0 < damping <= 1.0:
        raise ConfigError("damping must lie in (0, 1]")
    ens = (ensemble or EnsembleConfig()).resolve(spec)
    d = spec.dims
    noise = None if spec.deterministic else ens.noise(spec, grid)
    x0i, x1i = ens.initial_states(spec)
    n = grid.n_steps
    R, M = ens.R, ens.M
    u0n = _u0_nodes(u0, R)
    if guess is not None:
        ctrl = np.broadcast_to(guess.values, (R, M, n + 1, d["m"])).copy()
    else:
        ctrl = np.broadcast_to(spec.project_u1(np.zeros(d["m"])), (R, M, n + 1, d["m"])).copy()
    t = grid.t[:n]
    changes = []
    for it in range(max_iter):
        x0, x1, z = _forward_followers(spec, grid, u0n, ctrl, x0i, x1i, noise)
        sweep, cf = _follower_backward(spec, grid, u0n, ctrl, x0, x1, z, noise, ens, False)
        new = np.empty_like(ctrl)
        new[:, :, :n] = _alpha(spec, t, x1[:, :, :n], x0[:, None, :n], u0n[:, None, :n], z[:, None, :n],
                               sweep.Y_next[:, :, :n])
        new[:, :, n] = new[:, :, n - 1]
        diff = new[:, :, :n] - ctrl[:, :, :n]
        change = float(np.sqrt(np.mean(np.sum(diff ** 2, axis=(-1, -2)) * grid.h)))
        changes.append(change)
        if not np.isfinite(change):
            raise DivergenceError("follower fixed point produced non-finite controls", trace=changes[-10:])
        if change <= tol:
            break
        ctrl = (1.0 - damping) * ctrl + damping * new
    else:
        raise DivergenceError(f"follower fixed point did not converge in {max_iter} iterations",
                              trace=changes[-10:])
    # final pass keeps the regression fits; the returned control is alpha at the stored adjoint
    sweep, cf = _follower_backward(spec, grid, u0n, ctrl, x0, x1, z, noise, ens, True)
    new[:, :, :n] = _alpha(spec, t, x1[:, :, :n], x0[:, None, :n], u0n[:, None, :n], z[:, None, :n],
                           sweep.Y_next[:, :, :n])
    new[:, :, n] = new[:, :, n - 1]
    return FollowerMPSolution(
        grid, u0, x0, x1, sweep.Y, sweep.Y_next, sweep.L0, sweep.L1,
        ControlProfile(new, "per-particle", spec.project_u1), z, sweep.fits, cf, noise,
        {"iterations": len(changes), "changes": changes, "damping": damping, "R": R, "M": M,
         "fixed_point_gap": float(np.max(np.abs(new[:, :, :n] - ctrl[:, :, :n]), initial=0.0))})


def follower_stationarity_residual(solution: FollowerMPSolution, spec: GameSpec,
                                   u0: ControlProfile | None = None) -> np.ndarray:
    """Per-node worst projected-gradient norm of dH1/du1 along the solution, shape (n,)."""
    g, n = solution.grid, solution.grid.n_steps
    u0n = _u0_nodes(u0 or solution.u0, solution.x1.shape[0])
    u = solution.control.values[:, :, :n]
    grad = follower_hamiltonian_u(spec, g.t[:n], solution.x1[:, :, :n], u, solution.x0[:, None, :n],
                                  u0n[:, None, :n], solution.z[:, None, :n], solution.p_next[:, :, :n])
    res = projected_gradient_residual(u, grad, spec.project_u1)
    return res.max(axis=(0, 1))


def follower_cost(spec: GameSpec, solution: FollowerMPSolution,
                  control: ControlProfile | None = None) -> float:
    """J1 = E[sum_k h g1 + G1(x1_N)] along the stored states (mean over the ensemble)."""
    g, n = solution.grid, solution.grid.n_steps
    c = (control or solution.control).values
    c = np.broadcast_to(c, solution.x1.shape[:2] + c.shape[-2:])
    u0n = _u0_nodes(solution.u0, solution.x1.shape[0])
    run = spec.call("g1", g.t[:n], solution.x1[:, :, :n], c[:, :, :n], solution.x0[:, None, :n],
                    u0n[:, None, :n], solution.z[:, None, :n])
    return float(np.mean(g.h * run.sum(axis=-1) + spec.call("G1", solution.x1[:, :, n])))


def simulate_follower_cost(spec: GameSpec, u0: ControlProfile, control: ControlProfile,
                           ensemble: EnsembleConfig | None, grid: TimeGrid) -> float:
    """Limit-system follower cost when every follower plays `control` (used by grid searches)."""
    ens = (ensemble or EnsembleConfig()).resolve(spec)
    noise = None if spec.deterministic else ens.noise(spec, grid)
    x0i, x1i = ens.initial_states(spec)
    n = grid.n_steps
    ctrl = np.broadcast_to(control.values, (ens.R, ens.M, n + 1, spec.m))
    u0n = _u0_nodes(u0, ens.R)
    x0, x1, z = _forward_followers(spec, grid, u0n, ctrl, x0i, x1i, noise)
    run = spec.call("g1", grid.t[:n], x1[:, :, :n], ctrl[:, :, :n], x0[:, None, :n], u0n[:, None, :n],
                    z[:, None, :n])
    return float(np.mean(grid.h * run.sum(axis=-1) + spec.call("G1", x1[:, :, n])))


# ---------------------------------------------------------------------------
# Leader state system: X = (x0, x1), Y = p


@dataclass
class LeaderSystemState:
    grid: TimeGrid
    u0: ControlProfile
    x0: np.ndarray
    x1: np.ndarray
    p: np.ndarray
    p_next: np.ndarray
    l: np.ndarray
    q: np.ndarray
    z: np.ndarray
    problem: FbsdeProblem
    solution: FbsdeSolution
    noise: NoiseBundle | None
    ensemble: EnsembleConfig
    diagnostics: dict = field(default_factory=dict)

    @staticmethod
    def unpack(sol: FbsdeSolution, k: int):
        X = sol.X
        return X[..., :k], X[..., k:], sol.Y, sol.Y_next

    def pack(self) -> FbsdeSolution:
        X = np.concatenate([np.broadcast_to(self.x0[:, None], self.x1.shape[:2] + self.x0.shape[1:]),
                            self.x1], axis=-1)
        return FbsdeSolution(self.grid, X, self.p, self.p_next, self.l, self.q)


def _coupling(rows_k: int, n: int) -> np.ndarray:
    return np.concatenate([np.zeros((n, rows_k)), np.eye(n)], axis=1)


def leader_state_problem(spec: GameSpec, u0: ControlProfile, grid: TimeGrid, chi0: np.ndarray,
                         coeffs: LeaderCoefficients | None = None) -> FbsdeProblem:
    """Pack the leader's state system as a conditional mean-field FBSDE."""
    coeffs = coeffs or assemble_leader_coefficients(spec)
    d = spec.dims
    k, n = d["k"], d["n"]
    R = chi0.shape[0]
    u0n = _u0_nodes(u0, R)

    def split(X, Xh):
        return X[..., :k], X[..., k:], Xh[..., k:]

    def U(kk):
        return u0n[:, None, kk]

    def psi(t, kk, X, Y, Xh, Yh):
        x0, x1, z = split(X, Xh)
        u = U(kk)
        b0 = spec.call("b0", t, x0, u, z)
        B1 = coeffs.B1(t, x1, x0, u, z, Y)
        return np.concatenate([np.broadcast_to(b0, B1.shape[:-1] + b0.shape[-1:]), B1], axis=-1)

    def D(t, kk, X, Y, Xh, Yh):
        x0, x1, z = split(X, Xh)
        return coeffs.Phi(t, x1, x0, U(kk), z, Y)

    def h(XT, XhT):
        return spec.call("G1_x1", XT[..., k:])

    theta0 = np.concatenate([spec.sigma0, np.zeros((n, d["j0"]))], axis=0)
    theta1 = np.concatenate([np.zeros((k, d["j"])), spec.sigma], axis=0)
    return FbsdeProblem(n1=k + n, m1=n, psi=psi, D=D, h=h, theta0=theta0, theta1=theta1, chi0=chi0,
                        G=_coupling(k, n), name=f"{spec.name}-leader-state")


def _solve(problem, grid, noise, method, guess, tol, damping, degree):
    if method == "picard":
        return solve_picard(problem, grid, noise, guess=guess, damping=damping, tol=tol, degree=degree)
    if method == "continuation":
        from .fbsde import ContinuationSchedule
        return solve_continuation(problem, grid, ContinuationSchedule(tol=tol), noise, degree=degree)
    raise ConfigError(f"unknown FBSDE method {method!r}")


def _chi0(spec, ens):
    x0i, x1i = ens.initial_states(spec)
    return np.concatenate([np.broadcast_to(x0i[:, None], x1i.shape[:2] + x0i.shape[-1:]), x1i], axis=-1)


def solve_leader_state(u0: ControlProfile, spec: GameSpec, ensemble: EnsembleConfig | None,
                       grid: TimeGrid, tol: float = 1e-11, method: str = "picard",
                       damping: float = 0.5, guess: LeaderSystemState | None = None,
                       coeffs: LeaderCoefficients | None = None) -> LeaderSystemState:
    ens = (ensemble or EnsembleConfig()).resolve(spec)
    noise = None if spec.deterministic else ens.noise(spec, grid)
    prob = leader_state_problem(spec, u0, grid, _chi0(spec, ens), coeffs)
    sol = _solve(prob, grid, noise, method, guess.solution if guess else None, tol, damping, ens.degree)
    k = spec.dims["k"]
    x0, x1, p, pn = LeaderSystemState.unpack(sol, k)
    z = x1.mean(axis=1)
    return LeaderSystemState(grid, u0, x0[:, 0], x1, p, pn, sol.L0, sol.L1, z, prob, sol, noise, ens,
                             dict(sol.diagnostics))


def _frozen(spec, coeffs, state: LeaderSystemState, u0: ControlProfile | None = None):
    """Leader-coefficient Jacobians at the nodes (x_k, E[p_{k+1}|F_k]), k < n."""
    g, n = state.grid, state.grid.n_steps
    u0n = _u0_nodes(u0 or state.u0, state.x1.shape[0])
    args = (g.t[:n], state.x1[:, :, :n], state.x0[:, None, :n], u0n[:, None, :n],
            state.z[:, None, :n], state.p_next[:, :, :n])
    jac = coeffs.jacobians(*args)
    largs = (g.t[:n], state.x0[:, None, :n], u0n[:, None, :n], state.z[:, None, :n])
    for nm in ("b0_x0", "b0_u0", "b0_z", "g0_x0", "g0_u0", "g0_z"):
        v = spec.call(nm, *largs)
        jac[nm] = np.broadcast_to(v, jac["B1"].shape[:3] + v.shape[3:])
    return jac


def _mv(A, x):
    return np.einsum("...ij,...j->...i", A, x)


def _mtv(A, x):
    return np.einsum("...ij,...i->...j", A, x)


@dataclass
class VariationalSolution:
    x0: np.ndarray
    x1: np.ndarray
    p: np.ndarray
    p_next: np.ndarray
    l: np.ndarray
    q: np.ndarray
    solution: FbsdeSolution


def solve_variational(u0: ControlProfile, v0: ControlProfile, frozen: LeaderSystemState,
                      spec: GameSpec, grid: TimeGrid, tol: float = 1e-12, method: str = "picard",
                      damping: float = 0.5, coeffs: LeaderCoefficients | None = None) -> VariationalSolution:
    """Linearized leader state system in the direction v0 (zero initial data)."""
    coeffs = coeffs or assemble_leader_coefficients(spec)
    jac = _frozen(spec, coeffs, frozen, u0)
    d = spec.dims
    k, n = d["k"], d["n"]
    R, M = frozen.x1.shape[:2]
    v = _u0_nodes(v0, R)[:, None, : grid.n_steps]
    Hxx = spec.call("G1_x1x1", frozen.x1[:, :, -1])

    def parts(kk, X, Xh):
        return X[..., :k], X[..., k:], Xh[..., k:], v[:, :, kk]

    def J(name, kk):
        return jac[name][:, :, kk]

    def psi(t, kk, X, Y, Xh, Yh):
        a0, a1, zh, vv = parts(kk, X, Xh)
        dx0 = _mv(J("b0_x0", kk), a0) + _mv(J("b0_z", kk), zh) + _mv(J("b0_u0", kk), vv)
        dx1 = (_mv(J("B1_x1", kk), a1) + _mv(J("B1_x0", kk), a0) + _mv(J("B1_z", kk), zh)
               + _mv(J("B1_p", kk), Y) + _mv(J("B1_u0", kk), vv))
        return np.concatenate([np.broadcast_to(dx0, dx1.shape[:-1] + (k,)), dx1], axis=-1)

    def D(t, kk, X, Y, Xh, Yh):
        a0, a1, zh, vv = parts(kk, X, Xh)
        return (_mv(J("Phi_x1", kk), a1) + _mv(J("Phi_x0", kk), a0) + _mv(J("Phi_z", kk), zh)
                + _mv(J("Phi_p", kk), Y) + _mv(J("Phi_u0", kk), vv))

    def h(XT, XhT):
        return _mv(Hxx, XT[..., k:])

    stochastic = frozen.noise is not None
    prob = FbsdeProblem(n1=k + n, m1=n, psi=psi, D=D, h=h,
                        theta0=np.zeros((k + n, d["j0"])), theta1=np.zeros((k + n, d["j"])),
                        chi0=np.zeros((R, M, k + n)), G=_coupling(k, n),
                        regressors=frozen.solution.X if stochastic else None,
                        name=f"{spec.name}-variational")
    sol = _solve(prob, grid, frozen.noise, method, None, tol, damping, frozen.ensemble.degree)
    x0, x1, p, pn = LeaderSystemState.unpack(sol, k)
    return VariationalSolution(x0[:, 0], x1, p, pn, sol.L0, sol.L1, sol)


@dataclass
class LeaderAdjointState:
    """phi forward from 0; (K0, K1) backward.  K_next = E[K_{k+1} | F_k]."""

    grid: TimeGrid
    phi: np.ndarray
    K0: np.ndarray
    K1: np.ndarray
    K0_next: np.ndarray
    K1_next: np.ndarray
    Q0: np.ndarray
    Q1: np.ndarray
    problem: FbsdeProblem
    solution: FbsdeSolution
    diagnostics: dict = field(default_factory=dict)


def leader_adjoint_problem(spec: GameSpec, state: LeaderSystemState, u0: ControlProfile | None = None,
                           coeffs: LeaderCoefficients | None = None) -> FbsdeProblem:
    coeffs = coeffs or assemble_leader_coefficients(spec)
    jac = _frozen(spec, coeffs, state, u0)
    d = spec.dims
    k, n = d["k"], d["n"]
    R, M = state.x1.shape[:2]

    def J(name, kk):
        return jac[name][:, :, kk]

    def split(Y):
        return Y[..., :k], Y[..., k:]

    def psi(t, kk, X, Y, Xh, Yh):
        K0, K1 = split(Y)
        return -(_mtv(J("B1_p", kk), K1) - _mtv(J("Phi_p", kk), X))

    def D(t, kk, X, Y, Xh, Yh):
        K0, K1 = split(Y)
        dx0 = (_mtv(J("b0_x0", kk), K0) + _mtv(J("B1_x0", kk), K1) - _mtv(J("Phi_x0", kk), X)
               + J("g0_x0", kk))
        dx1 = _mtv(J("B1_x1", kk), K1) - _mtv(J("Phi_x1", kk), X)
        return np.concatenate([np.broadcast_to(dx0, dx1.shape[:-1] + (k,)), dx1], axis=-1)

    def Mf(t, kk, X, Y, Xh, Yh):
        K0, K1 = split(Y)
        dz = (_mtv(J("b0_z", kk), K0) + _mtv(J("B1_z", kk), K1) - _mtv(J("Phi_z", kk), X)
              + J("g0_z", kk))
        return np.concatenate([np.zeros(dz.shape[:-1] + (k,)), dz], axis=-1)

    G0x = spec.call("G0_x0", state.x0[:, -1])[:, None]
    Hxx = spec.call("G1_x1x1", state.x1[:, :, -1])

    def h(XT, XhT):
        K1T = -_mv(Hxx, XT)
        return np.concatenate([np.broadcast_to(G0x, K1T.shape[:-1] + (k,)), K1T], axis=-1)

    G = np.concatenate([np.zeros((k, n)), np.eye(n)], axis=0)
    stochastic = state.noise is not None
    return FbsdeProblem(n1=n, m1=k + n, psi=psi, D=D, M=Mf, h=h,
                        theta0=np.zeros((n, d["j0"])), theta1=np.zeros((n, d["j"])),
                        chi0=np.zeros((R, M, n)), G=G, branch="tau" if k else "lambda",
                        regressors=state.solution.X if stochastic else None,
                        name=f"{spec.name}-leader-adjoint")


def solve_leader_adjoint(state: LeaderSystemState, u0: ControlProfile | None, spec: GameSpec,
                         grid: TimeGrid, tol: float = 1e-12, method: str = "picard", damping: float = 0.5,
                         coeffs: LeaderCoefficients | None = None) -> LeaderAdjointState:
    prob = leader_adjoint_problem(spec, state, u0, coeffs)
    sol = _solve(prob, grid, state.noise, method, None, tol, damping, state.ensemble.degree)
    k = spec.dims["k"]
    return LeaderAdjointState(grid, sol.X, sol.Y[..., :k], sol.Y[..., k:], sol.Y_next[..., :k],
                              sol.Y_next[..., k:], sol.L0, sol.L1, prob, sol, dict(sol.diagnostics))


def leader_gradient(u0: ControlProfile, state: LeaderSystemState, adjoint: LeaderAdjointState,
                    spec: GameSpec, grid: TimeGrid, coeffs: LeaderCoefficients | None = None) -> np.ndarray:
    """E[dH0/du0 | F0] at (x_k, p_{k+1}, K_{k+1}, phi_k); node n is set to 0.

    Shape (n+1, m0) for a deterministic leader, (R, n+1, m0) otherwise.  The
    directional derivative of the discrete cost is sum_k h <grad_k, v_k>.
    """
    coeffs = coeffs or assemble_leader_coefficients(spec)
    jac = _frozen(spec, coeffs, state, u0)
    n = grid.n_steps
    phi = adjoint.phi[:, :, :n]
    g = (_mtv(jac["b0_u0"], adjoint.K0_next[:, :, :n]) + _mtv(jac["B1_u0"], adjoint.K1_next[:, :, :n])
         - _mtv(jac["Phi_u0"], phi) + jac["g0_u0"])
    g = g.mean(axis=1)
    out = np.zeros((g.shape[0], n + 1, g.shape[-1]))
    out[:, :n] = g
    return out[0] if u0.adaptedness == "deterministic" else out


def leader_cost(spec: GameSpec, u0: ControlProfile, state: LeaderSystemState) -> float:
    """J0 = E[sum_{k<n} h g0(t_k, x0, u0, z) + G0(x0_N)]."""
    g, n = state.grid, state.grid.n_steps
    u0n = _u0_nodes(u0, state.x0.shape[0])
    run = spec.call("g0", g.t[:n], state.x0[:, :n], u0n[:, :n], state.z[:, :n])
    return float(np.mean(g.h * run.sum(axis=-1) + spec.call("G0", state.x0[:, n])))


def _inner(a, b, grid):
    n = grid.n_steps
    return float(np.mean(np.sum(a[..., :n, :] * b[..., :n, :], axis=(-1, -2))) * grid.h)


# ---------------------------------------------------------------------------
# Descent and consistency


@dataclass
class ConsistencyState:
    u0: ControlProfile
    state: LeaderSystemState
    adjoint: LeaderAdjointState
    gradient: np.ndarray
    grid: TimeGrid
    diagnostics: dict = field(default_factory=dict)


@dataclass
class _Eval:
    u0: ControlProfile
    state: LeaderSystemState
    J: float
    adjoint: LeaderAdjointState | None = None
    grad: np.ndarray | None = None


def leader_descent(init: ControlProfile, spec: GameSpec, grid: TimeGrid,
                   ensemble: EnsembleConfig | None = None, tol: float = 1e-6, max_iter: int = 200,
                   c: float = 1e-4, ratio: float = 0.5, step0: float = 1.0, method: str = "picard",
                   inner_tol: float = 1e-12, damping: float = 0.5):
    """Projected gradient descent with Armijo backtracking on the leader cost.

    Stops when the projected-gradient norm (discrete L2) is <= tol.  The same
    ensemble (common random numbers) is used for every evaluation.
    """
    coeffs = assemble_leader_coefficients(spec)
    ens = (ensemble or EnsembleConfig()).resolve(spec)
    proj = spec.project_u0

    def evaluate(u, guess=None):
        st = solve_leader_state(u, spec, ens, grid, inner_tol, method, damping, guess, coeffs)
        return _Eval(u, st, leader_cost(spec, u, st))

    def differentiate(ev):
        ev.adjoint = solve_leader_adjoint(ev.state, ev.u0, spec, grid, inner_tol, method, damping, coeffs)
        ev.grad = leader_gradient(ev.u0, ev.state, ev.adjoint, spec, grid, coeffs)
        return ev

    cur = differentiate(evaluate(init))
    trace = [{"J": cur.J}]
    step = step0
    for it in range(max_iter + 1):
        pg = cur.u0.values - proj(cur.u0.values - cur.grad)
        res = float(np.sqrt(_inner(pg, pg, grid)))
        trace[-1]["residual"] = res
        if res <= tol:
            break
        if it == max_iter:
            raise DivergenceError(f"leader descent did not reach tol in {max_iter} iterations",
                                  residual=res, trace=trace[-5:])
        while True:
            cand_v = proj(cur.u0.values - step * cur.grad)
            cand = ControlProfile(cand_v, cur.u0.adaptedness, proj)
            ev = evaluate(cand, cur.state)
            if ev.J <= cur.J + c * _inner(cur.grad, cand_v - cur.u0.values, grid):
                break
            step *= ratio
            if step < 1e-14:
                raise StallError("line search failed", J=cur.J, residual=res, last_iterate=cur.u0.values)
        cur = differentiate(ev)
        trace.append({"J": cur.J, "step": step})
        step = min(step / ratio, step0)
    cs = ConsistencyState(cur.u0, cur.state, cur.adjoint, cur.grad, grid,
                          {"iterations": len(trace) - 1, "trace": trace})
    cs.diagnostics["residual"] = consistency_residual(cs, spec, grid)
    return cur.u0, cs


def consistency_residual(cs: ConsistencyState, spec: GameSpec, grid: TimeGrid) -> dict:
    """Defects of the state, adjoint and stationarity blocks, plus a max-norm headline.

    The stationarity block recomputes the gradient with ``cs.u0`` along the
    stored state and adjoint.
    """
    st, adj = cs.state, cs.adjoint
    coeffs = assemble_leader_coefficients(spec)
    out = {}
    prob = leader_state_problem(spec, cs.u0, grid, st.problem.chi0, coeffs)
    r = solution_residual(prob, st.solution, grid, st.noise)
    out["state_forward"] = r["forward_max"]
    out["state_backward"] = r["backward_max"]
    out["state_pins"] = max(r["initial_max"], r["terminal_max"])
    aprob = leader_adjoint_problem(spec, st, cs.u0, coeffs)
    r = solution_residual(aprob, adj.solution, grid, st.noise)
    out["adjoint_forward"] = r["forward_max"]
    out["adjoint_backward"] = r["backward_max"]
    out["adjoint_pins"] = max(r["initial_max"], r["terminal_max"])
    grad = leader_gradient(cs.u0, st, adj, spec, grid, coeffs)
    n = grid.n_steps
    pg = cs.u0.values[..., :n, :] - spec.project_u0(cs.u0.values[..., :n, :] - grad[..., :n, :])
    node = np.linalg.norm(pg, axis=-1)
    out["stationarity"] = float(node.max())
    out["stationarity_node"] = node.reshape(-1, n).max(axis=0)
    out["headline"] = max(v for kk, v in out.items() if kk != "stationarity_node")
    return out
