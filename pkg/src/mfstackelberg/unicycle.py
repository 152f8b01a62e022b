"""Unicycle swarm: followers steer a constant-speed vehicle toward a target while
a control centre adds a common steering correction.

Follower state (x, y, theta, w) with dx = v cos(theta), dy = v sin(theta),
dtheta = w + u_i + u_0, dw = sigma dB.  Costs

    follower: c1|x-a|^2 + c1|y-b|^2 + d1 u_i^2 + e1|z1-a|^2 + e1|z2-b|^2
    leader:   c0|z1-a|^2 + c0|z2-b|^2 + d0 u_0^2

with z the conditional mean of the follower state.  The leader has no state.

The deterministic leader problem is solved as a two-point boundary-value
problem in (x, y, theta, phi) forward and (p, K) backward, on the same
explicit scheme as the generic solvers: u_i at node k uses p3 at node k+1,
u_0 at node k uses K3 at node k+1.  With sigma = 0 the heading-noise
state w stays at 0 and its adjoint p4 never feeds back, so both are dropped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import optimize

from . import kernels
from .errors import ConfigError, DivergenceError
from .game import ZERO, CostSpec, FollowerDynamics, GameSpec, LeaderDynamics, StationarityMap
from .numerics import TimeGrid, make_grid
from .stackelberg import ControlProfile, EnsembleConfig, FollowerMPSolution, solve_follower_mp


@dataclass(frozen=True)
class UnicycleParams:
    v: float = 1.0
    sigma: float = 0.0
    a: float = 0.5
    b: float = 0.3
    c0: float = 1.0
    c1: float = 1.0
    d0: float = 1.0
    d1: float = 1.0
    e1: float = 0.5
    T: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not np.isfinite(val):
                raise ConfigError(f"unicycle parameter {f.name} must be finite")
        if self.v <= 0 or self.d0 <= 0 or self.d1 <= 0 or self.T <= 0:
            raise ConfigError("unicycle parameters need v, d0, d1, T > 0")
        if min(self.c0, self.c1, self.e1, self.sigma) < 0:
            raise ConfigError("unicycle weights and sigma must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "UnicycleParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown unicycle parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "UnicycleParams":
        d = self.to_dict()
        d.update(kw)
        return UnicycleParams.from_dict(d)


def unicycle_game_spec(params: UnicycleParams) -> GameSpec:
    """GameSpec with n = 4, m = m0 = 1, no leader state, one noise channel on w."""
    P = params
    e3 = np.array([0.0, 0.0, 1.0, 0.0])

    def b0(t, x0, u0, z):
        return np.zeros(x0.shape[:-1] + (0,))

    def b1(t, x1, u1, x0, u0, z):
        th = x1[..., 2]
        return np.stack([P.v * np.cos(th), P.v * np.sin(th), x1[..., 3] + u1[..., 0] + u0[..., 0],
                         np.zeros_like(th)], axis=-1)

    def b1_x1(t, x1, u1, x0, u0, z):
        th = x1[..., 2]
        J = np.zeros(th.shape + (4, 4))
        J[..., 0, 2] = -P.v * np.sin(th)
        J[..., 1, 2] = P.v * np.cos(th)
        J[..., 2, 3] = 1.0
        return J

    def b1_x1x1(t, x1, u1, x0, u0, z):
        th = x1[..., 2]
        H = np.zeros(th.shape + (4, 4, 4))
        H[..., 0, 2, 2] = -P.v * np.cos(th)
        H[..., 1, 2, 2] = -P.v * np.sin(th)
        return H

    def e3_col(t, x1, u1, x0, u0, z):
        return np.broadcast_to(e3[:, None], x1.shape[:-1] + (4, 1))

    target = np.array([P.a, P.b])

    def sq_target(x, w):
        return w * np.sum((x[..., :2] - target) ** 2, axis=-1)

    def grad_target(x, w):
        g = np.zeros(x.shape)
        g[..., :2] = 2.0 * w * (x[..., :2] - target)
        return g

    def g0(t, x0, u0, z):
        return sq_target(z, P.c0) + P.d0 * u0[..., 0] ** 2

    def g1(t, x1, u1, x0, u0, z):
        return sq_target(x1, P.c1) + P.d1 * u1[..., 0] ** 2 + sq_target(z, P.e1)

    hess = np.diag([2.0 * P.c1, 2.0 * P.c1, 0.0, 0.0])

    def alpha1(t, x1, x0, u0, z, p):
        return -p[..., 2:3] / (2.0 * P.d1)

    a1p = np.array([[0.0, 0.0, -1.0 / (2.0 * P.d1), 0.0]])

    return GameSpec(
        leader=LeaderDynamics(b0=b0, sigma0=np.zeros((0, 0)), b0_x0=ZERO, b0_u0=ZERO, b0_z=ZERO),
        follower=FollowerDynamics(
            b1=b1, sigma=np.array([[0.0], [0.0], [0.0], [P.sigma]]),
            b1_x1=b1_x1, b1_u1=e3_col, b1_x0=ZERO, b1_u0=e3_col, b1_z=ZERO,
            b1_x1x1=b1_x1x1, b1_x1u1=ZERO, b1_x1x0=ZERO, b1_x1u0=ZERO, b1_x1z=ZERO),
        costs=CostSpec(
            g0=g0, G0=lambda x0: np.zeros(x0.shape[:-1]), g1=g1, G1=lambda x1: np.zeros(x1.shape[:-1]),
            g0_x0=ZERO, g0_u0=lambda t, x0, u0, z: 2.0 * P.d0 * u0,
            g0_z=lambda t, x0, u0, z: grad_target(z, P.c0), G0_x0=ZERO,
            g1_x1=lambda t, x1, u1, x0, u0, z: grad_target(x1, P.c1),
            g1_u1=lambda t, x1, u1, x0, u0, z: 2.0 * P.d1 * u1,
            g1_x0=ZERO, g1_u0=ZERO,
            g1_z=lambda t, x1, u1, x0, u0, z: grad_target(z, P.e1),
            G1_x1=ZERO, G1_x1x1=ZERO,
            g1_x1x1=lambda t, x1, u1, x0, u0, z: np.broadcast_to(hess, x1.shape[:-1] + (4, 4)),
            g1_x1u1=ZERO, g1_x1x0=ZERO, g1_x1u0=ZERO, g1_x1z=ZERO),
        stationarity=StationarityMap(
            alpha1=alpha1, a1_x1=ZERO, a1_x0=ZERO, a1_u0=ZERO, a1_z=ZERO,
            a1_p=lambda t, x1, x0, u0, z, p: np.broadcast_to(a1p, p.shape[:-1] + (1, 4))),
        m0=1, m=1, name="unicycle")


# ---------------------------------------------------------------------------
# Follower


@dataclass
class UnicycleFollowerSolution:
    """States, adjoints and controls of the representative follower, shape (R, M, n+1[, .])."""

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    w: np.ndarray
    p: np.ndarray
    p_next: np.ndarray
    q: np.ndarray
    u: np.ndarray
    mp: FollowerMPSolution
    params: UnicycleParams

    def control_residual(self) -> float:
        """max over nodes k < n of |u_i + p3_{k+1}/(2 d1)|."""
        n = self.mp.grid.n_steps
        return float(np.max(np.abs(self.u[..., :n] + self.p_next[..., :n, 2] / (2.0 * self.params.d1))))


def solve_unicycle_follower(u0: ControlProfile, params: UnicycleParams, ensemble: EnsembleConfig | None,
                            grid: TimeGrid, tol: float = 1e-12, damping: float = 0.5,
                            max_iter: int = 500) -> UnicycleFollowerSolution:
    spec = unicycle_game_spec(params)
    mp = solve_follower_mp(u0, spec, ensemble, grid, tol=tol, damping=damping, max_iter=max_iter)
    x = mp.x1
    return UnicycleFollowerSolution(x[..., 0], x[..., 1], x[..., 2], x[..., 3], mp.p, mp.p_next, mp.q,
                                    mp.control.values[..., 0], mp, params)


def follower_cost_open_loop(params: UnicycleParams, u0: np.ndarray, u1: np.ndarray, z: np.ndarray,
                            grid: TimeGrid) -> np.ndarray:
    """Deterministic follower cost for a batch of open-loop controls u1 (..., n) with z frozen.

    u0 has shape (n,) or broadcasts against u1; z is the (n+1, >=2) mean path.
    """
    n = grid.n_steps
    u1 = np.asarray(u1, dtype=float)
    x, y, _ = kernels.unicycle_rollout(np.broadcast_to(u0[:n] if u0.ndim == 1 else u0, u1.shape) + u1,
                                       grid.h, params.v)
    P = params
    run = (P.c1 * ((x[..., :n] - P.a) ** 2 + (y[..., :n] - P.b) ** 2) + P.d1 * u1 ** 2
           + P.e1 * ((z[:n, 0] - P.a) ** 2 + (z[:n, 1] - P.b) ** 2))
    return grid.h * run.sum(axis=-1)


def _piecewise(levels: np.ndarray, intervals: int, n: int) -> np.ndarray:
    combos = np.array(np.meshgrid(*([levels] * intervals), indexing="ij")).reshape(intervals, -1).T
    idx = np.minimum((np.arange(n) * intervals) // n, intervals - 1)
    return combos[:, idx]


def grid_search_follower(params: UnicycleParams, u0: np.ndarray, z: np.ndarray, grid: TimeGrid,
                         levels: np.ndarray, intervals: int = 4) -> dict:
    """Exhaustive search over piecewise-constant follower controls with z frozen.

    Returns the best cost, its control and the resolution: the largest cost
    change between the best grid point and its one-step neighbours.
    """
    n = grid.n_steps
    U = _piecewise(np.asarray(levels, float), intervals, n)
    J = follower_cost_open_loop(params, np.asarray(u0, float), U, z, grid)
    best = int(np.argmin(J))
    L = len(levels)
    digits = np.unravel_index(best, (L,) * intervals)
    nbrs = []
    for i in range(intervals):
        for s in (-1, 1):
            d = list(digits)
            d[i] += s
            if 0 <= d[i] < L:
                nbrs.append(np.ravel_multi_index(d, (L,) * intervals))
    res = float(np.max(np.abs(J[nbrs] - J[best]))) if nbrs else 0.0
    return {"cost": float(J[best]), "control": U[best], "resolution": res, "evaluated": int(J.size)}


def follower_sweep(params: UnicycleParams, u0: np.ndarray, grid: TimeGrid, tol: float = 1e-12,
                   damping: float = 0.5, max_iter: int = 2000):
    """Deterministic follower BVP for a batch of leader controls u0 (..., n).

    Returns (u1, x, y, theta, p) with u1 = -p3_next/(2 d1).  Used by the leader
    brute-force oracle where thousands of candidates are solved at once.
    """
    P, h, n = params, grid.h, grid.n_steps
    u0 = np.asarray(u0, dtype=float)[..., :n]
    u1 = np.zeros_like(u0)
    for it in range(max_iter):
        x, y, th = kernels.unicycle_rollout(u0 + u1, h, P.v)
        p = _follower_adjoint(P, x, y, th, h)
        new = -p[..., 1:, 2] / (2.0 * P.d1)
        change = np.max(np.abs(new - u1), initial=0.0)
        u1 = (1.0 - damping) * u1 + damping * new
        if change <= tol:
            break
    else:
        raise DivergenceError("follower sweep did not converge", change=float(change))
    x, y, th = kernels.unicycle_rollout(u0 + u1, h, P.v)
    return u1, x, y, th, _follower_adjoint(P, x, y, th, h)


def _rcumsum(a):
    out = np.zeros(a.shape[:-1] + (a.shape[-1] + 1,))
    out[..., :-1] = np.cumsum(a[..., ::-1], axis=-1)[..., ::-1]
    return out


def _follower_adjoint(P, x, y, th, h):
    """p_k = p_{k+1} + h Phi(x_k, p_{k+1}), p_N = 0 (first three components)."""
    n = x.shape[-1] - 1
    p1 = h * _rcumsum(2.0 * P.c1 * (x[..., :n] - P.a))
    p2 = h * _rcumsum(2.0 * P.c1 * (y[..., :n] - P.b))
    s, c = np.sin(th[..., :n]), np.cos(th[..., :n])
    p3 = h * _rcumsum(P.v * (-s * p1[..., 1:] + c * p2[..., 1:]))
    return np.stack([p1, p2, p3], axis=-1)


def grid_search_leader(params: UnicycleParams, grid: TimeGrid, levels: np.ndarray,
                       intervals: int = 4) -> dict:
    """Exhaustive search over piecewise-constant leader controls; each candidate
    is scored after solving the deterministic follower best response."""
    n = grid.n_steps
    U0 = _piecewise(np.asarray(levels, float), intervals, n)
    _, x, y, _, _ = follower_sweep(params, U0, grid)
    J = leader_cost_paths(params, U0, x, y, grid)
    best = int(np.argmin(J))
    return {"cost": float(J[best]), "control": U0[best], "evaluated": int(J.size)}


def leader_cost_paths(params: UnicycleParams, u0, x, y, grid: TimeGrid):
    n = grid.n_steps
    P = params
    run = P.c0 * ((x[..., :n] - P.a) ** 2 + (y[..., :n] - P.b) ** 2) + P.d0 * np.asarray(u0)[..., :n] ** 2
    return grid.h * run.sum(axis=-1)


# ---------------------------------------------------------------------------
# Leader boundary-value problem


@dataclass
class LeaderBvpSolution:
    """Node paths on the grid; p, K, phi have three columns (x, y, theta components).

    u0[k] = -K3[k+1]/(2 d0) and u1[k] = -p3[k+1]/(2 d1) for k < n; both are 0 at node n.
    """

    grid: TimeGrid
    params: UnicycleParams
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    K: np.ndarray
    phi: np.ndarray
    u0: np.ndarray
    u1: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def pins(self) -> dict:
        return {"x(0)": abs(float(self.x[0])), "y(0)": abs(float(self.y[0])),
                "theta(0)": abs(float(self.theta[0])), "phi(0)": float(np.max(np.abs(self.phi[0]))),
                "p(T)": float(np.max(np.abs(self.p[-1]))), "K(T)": float(np.max(np.abs(self.K[-1])))}

    def stationarity(self) -> float:
        """max_k |K3_{k+1} + 2 d0 u0_k| over k < n."""
        return float(np.max(np.abs(self.K[1:, 2] + 2.0 * self.params.d0 * self.u0[:-1])))

    def follower_stationarity(self) -> float:
        return float(np.max(np.abs(self.p[1:, 2] + 2.0 * self.params.d1 * self.u1[:-1])))

    def defects(self) -> dict:
        """Max defect of each discrete recurrence along the stored paths."""
        P, h = self.params, self.grid.h
        x, y, th, p, K, phi = self.x, self.y, self.theta, self.p, self.K, self.phi
        s, c = np.sin(th[:-1]), np.cos(th[:-1])
        pn, Kn = p[1:], K[1:]
        f_state = np.abs(np.stack([x[1:] - x[:-1] - h * P.v * c, y[1:] - y[:-1] - h * P.v * s,
                                   th[1:] - th[:-1] - h * (self.u0[:-1] + self.u1[:-1])]))
        Phi = np.stack([2 * P.c1 * (x[:-1] - P.a), 2 * P.c1 * (y[:-1] - P.b),
                        P.v * (-s * pn[:, 0] + c * pn[:, 1])], axis=-1)
        dphi = np.stack([-P.v * phi[:-1, 2] * s, P.v * phi[:-1, 2] * c, Kn[:, 2] / (2 * P.d1)], axis=-1)
        dK = _dK(P, x[:-1], y[:-1], s, c, pn, Kn, phi[:-1])
        return {"state": float(f_state.max()), "p": float(np.abs(p[:-1] - pn - h * Phi).max()),
                "phi": float(np.abs(phi[1:] - phi[:-1] - h * dphi).max()),
                "K": float(np.abs(K[:-1] - Kn - h * dK).max())}

    def leader_cost(self) -> float:
        return float(leader_cost_paths(self.params, self.u0, self.x, self.y, self.grid))

    def trajectory(self) -> tuple[list, np.ndarray]:
        """Columns t, x, y, theta, u0, ui, p13, K13."""
        cols = ["t", "x", "y", "theta", "u0", "ui", "p13", "K13"]
        data = np.column_stack([self.grid.t, self.x, self.y, self.theta, self.u0, self.u1,
                                self.p[:, 2], self.K[:, 2]])
        return cols, data


def _dK(P, x, y, s, c, pn, Kn, phi):
    return np.stack([-2 * P.c1 * phi[..., 0] + 2 * P.c0 * (x - P.a),
                     -2 * P.c1 * phi[..., 1] + 2 * P.c0 * (y - P.b),
                     -P.v * s * Kn[..., 0] + P.v * c * Kn[..., 1]
                     + P.v * phi[..., 2] * (c * pn[..., 0] + s * pn[..., 1])], axis=-1)


def _sweep_once(P, u0, u1, K_old, h):
    n = u0.shape[-1]
    x, y, th = kernels.unicycle_rollout(u0 + u1, h, P.v)
    p = _follower_adjoint(P, x, y, th, h)
    s, c = np.sin(th[:n]), np.cos(th[:n])
    # phi forward with the previous K, then K backward with the new phi
    phi = np.zeros((n + 1, 3))
    phi[1:, 2] = np.cumsum(h * K_old[1:, 2] / (2 * P.d1))
    phi[1:, 0] = np.cumsum(-h * P.v * phi[:n, 2] * s)
    phi[1:, 1] = np.cumsum(h * P.v * phi[:n, 2] * c)
    K = np.zeros((n + 1, 3))
    K[:, 0] = h * _rcumsum(-2 * P.c1 * phi[:n, 0] + 2 * P.c0 * (x[:n] - P.a))
    K[:, 1] = h * _rcumsum(-2 * P.c1 * phi[:n, 1] + 2 * P.c0 * (y[:n] - P.b))
    K[:, 2] = h * _rcumsum(-P.v * s * K[1:, 0] + P.v * c * K[1:, 1]
                           + P.v * phi[:n, 2] * (c * p[1:, 0] + s * p[1:, 1]))
    return x, y, th, p, phi, K


def _pack(grid, P, x, y, th, p, K, phi, u0, u1, diag):
    U0 = np.append(u0, 0.0)
    U1 = np.append(u1, 0.0)
    return LeaderBvpSolution(grid, P, x, y, th, p, K, phi, U0, U1, diag)


def _shoot(P, grid, guess, tol):
    h, n = grid.h, grid.n_steps
    coef = np.array([P.v, P.a, P.b, P.c0, P.c1, P.d0, P.d1])

    def resid(z):
        out = kernels.unicycle_shoot(z, coef, h, n)
        return np.concatenate([out[1][-1], out[2][-1]])

    sol = optimize.root(resid, guess, method="hybr", options={"xtol": 1e-15, "maxfev": 2000})
    traj = kernels.unicycle_shoot(sol.x, coef, h, n)
    return sol, traj


def solve_unicycle_leader_bvp(params: UnicycleParams, grid: TimeGrid | None = None, tol: float = 1e-12,
                              max_sweeps: int = 2000, damping: float = 0.5,
                              shooting: str = "auto") -> LeaderBvpSolution:
    """Deterministic leader BVP by damped forward-backward sweep.

    Each sweep integrates the states under the current controls, the follower
    adjoint p backward, phi forward and K backward, then moves (u_i, u_0)
    toward the closed forms -p3/(2 d1), -K3/(2 d0).  Converged when the
    undamped control change is <= tol.  If the sweep diverges or stalls, a
    shooting method on the six unknown initial adjoint values is tried once
    (shooting='auto'); 'always' skips the sweep, 'never' disables the fallback.
    """
    P = params
    if P.sigma > 0:
        raise ConfigError("the leader boundary-value problem is deterministic: set sigma = 0 "
                          "(the stochastic leader problem lacks the required regularity)")
    if shooting not in ("auto", "always", "never"):
        raise ConfigError("shooting must be 'auto', 'always' or 'never'")
    grid = grid or make_grid(P.T, 200)
    if abs(grid.T - P.T) > 1e-12:
        raise ConfigError(f"grid horizon {grid.T} differs from T = {P.T}")
    h, n = grid.h, grid.n_steps
    u0 = np.zeros(n)
    u1 = np.zeros(n)
    K = np.zeros((n + 1, 3))
    changes = []
    failure = None
    if shooting != "always":
        for sweep in range(1, max_sweeps + 1):
            x, y, th, p, phi, K = _sweep_once(P, u0, u1, K, h)
            new1 = -p[1:, 2] / (2 * P.d1)
            new0 = -K[1:, 2] / (2 * P.d0)
            change = float(max(np.max(np.abs(new1 - u1)), np.max(np.abs(new0 - u0))))
            changes.append(change)
            if not np.isfinite(change) or change > 1e8:
                failure = "diverged"
                break
            if change <= tol:
                # closing pass: controls from the final adjoints, states refreshed
                u0, u1 = new0, new1
                x, y, th, p, phi, K = _sweep_once(P, u0, u1, K, h)
                diag = {"method": "sweep", "sweeps": sweep, "changes": changes[-20:], "damping": damping,
                        "fallback": False}
                sol = _pack(grid, P, x, y, th, p, K, phi, u0, u1, diag)
                if sol.stationarity() <= 10 * tol and sol.follower_stationarity() <= 10 * tol:
                    return sol
                failure = "closing pass left a stationarity defect"
                break
            u0 = (1 - damping) * u0 + damping * new0
            u1 = (1 - damping) * u1 + damping * new1
        else:
            failure = "stalled"
        if shooting == "never":
            raise DivergenceError(f"leader sweep {failure}; try a smaller damping or a shorter horizon",
                                  changes=changes[-10:])
    # shooting fallback, seeded from the sweep's last adjoints when available
    guess = np.zeros(6)
    if changes and np.isfinite(changes[-1]) and failure != "diverged":
        guess = np.concatenate([p[0], K[0]])
    res, traj = _shoot(P, grid, guess, tol)
    X, pp, KK, ph, uu0, uu1 = traj
    diag = {"method": "shooting", "sweeps": len(changes), "fallback": shooting == "auto",
            "sweep_failure": failure, "root_success": bool(res.success), "root_message": str(res.message),
            "nfev": int(res.nfev)}
    sol = _pack(grid, P, X[:, 0], X[:, 1], X[:, 2], pp, KK, ph, uu0[:n], uu1[:n], diag)
    pins = sol.pins()
    # hybr reports xtol stalls at round-off as failures, so the pins decide
    if max(pins.values()) > max(1e-8, 10 * tol):
        raise DivergenceError("leader boundary-value problem failed (sweep " + str(failure)
                              + ", shooting did not close the pins); try a smaller damping or shorter T",
                              pins=pins, changes=changes[-10:])
    return sol


@dataclass
class AprioriReport:
    passed: bool
    margins: dict
    witness: dict


def check_apriori_bounds(sol: LeaderBvpSolution, params: UnicycleParams | None = None,
                         rtol: float = 1e-12) -> AprioriReport:
    """|x|, |y| <= vT, |p1| <= 2 c1 T (vT + |a|), |p2| <= 2 c1 T (vT + |b|) at every node.

    Margins are bound minus worst value; equality passes (a zero bound is
    allowed when c1 = 0).  The witness is the node of the worst margin.
    """
    P = params or sol.params
    vT = P.v * P.T
    checks = {"|x|<=vT": (np.abs(sol.x), vT), "|y|<=vT": (np.abs(sol.y), vT),
              "|p11|<=2c1T(vT+a)": (np.abs(sol.p[:, 0]), 2 * P.c1 * P.T * (vT + abs(P.a))),
              "|p12|<=2c1T(vT+b)": (np.abs(sol.p[:, 1]), 2 * P.c1 * P.T * (vT + abs(P.b)))}
    margins, witness, ok = {}, {}, True
    for name, (vals, bound) in checks.items():
        k = int(np.argmax(vals))
        margins[name] = float(bound - vals[k])
        witness[name] = k
        ok &= bool(vals[k] <= bound * (1 + rtol) + rtol)
    return AprioriReport(ok, margins, witness)
