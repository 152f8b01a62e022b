"""Declarative game data: coefficients, costs, Hamiltonians, mean-field averages.

Callbacks are vectorized.  Every state-like argument has its components in the
last axis and arbitrary leading (batch) axes; the time argument has only the
batch axes.  Jacobians have shape (..., out, in); second partials of b1 are
stored as (..., n, n, in) with entry [i, j, l] = d^2 b1_i / dx1_j d(in)_l.

A derivative that vanishes identically is declared with the ``ZERO``
sentinel.  ``None`` means "not supplied", which is a configuration error as soon
as an operation needs it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, StationarityError
from .numerics import TimeGrid


class _Zero:
    def __repr__(self):
        return "ZERO"


ZERO = _Zero()

SIG_LEADER = ("t", "x0", "u0", "z")
SIG_FOLLOWER = ("t", "x1", "u1", "x0", "u0", "z")
SIG_ALPHA = ("t", "x1", "x0", "u0", "z", "p")


def _identity(u):
    return u


@dataclass(frozen=True)
class LeaderDynamics:
    b0: Callable
    sigma0: np.ndarray
    b0_x0: object = None
    b0_u0: object = None
    b0_z: object = None


@dataclass(frozen=True)
class FollowerDynamics:
    b1: Callable
    sigma: np.ndarray
    b1_x1: object = None
    b1_u1: object = None
    b1_x0: object = None
    b1_u0: object = None
    b1_z: object = None
    b1_x1x1: object = None
    b1_x1u1: object = None
    b1_x1x0: object = None
    b1_x1u0: object = None
    b1_x1z: object = None


@dataclass(frozen=True)
class CostSpec:
    g0: Callable
    G0: Callable
    g1: Callable
    G1: Callable
    g0_x0: object = None
    g0_u0: object = None
    g0_z: object = None
    G0_x0: object = None
    g1_x1: object = None
    g1_u1: object = None
    g1_x0: object = None
    g1_u0: object = None
    g1_z: object = None
    G1_x1: object = None
    G1_x1x1: object = None
    g1_x1x1: object = None
    g1_x1u1: object = None
    g1_x1x0: object = None
    g1_x1u0: object = None
    g1_x1z: object = None


@dataclass(frozen=True)
class StationarityMap:
    alpha1: Callable
    a1_x1: object = None
    a1_x0: object = None
    a1_u0: object = None
    a1_z: object = None
    a1_p: object = None


# name -> (component attribute, signature, trailing output shape in terms of dims)
_REGISTRY = {
    "b0": ("leader", SIG_LEADER, lambda d: (d["k"],)),
    "b0_x0": ("leader", SIG_LEADER, lambda d: (d["k"], d["k"])),
    "b0_u0": ("leader", SIG_LEADER, lambda d: (d["k"], d["m0"])),
    "b0_z": ("leader", SIG_LEADER, lambda d: (d["k"], d["n"])),
    "b1": ("follower", SIG_FOLLOWER, lambda d: (d["n"],)),
    "b1_x1": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["n"])),
    "b1_u1": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["m"])),
    "b1_x0": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["k"])),
    "b1_u0": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["m0"])),
    "b1_z": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["n"])),
    "b1_x1x1": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["n"], d["n"])),
    "b1_x1u1": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["n"], d["m"])),
    "b1_x1x0": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["n"], d["k"])),
    "b1_x1u0": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["n"], d["m0"])),
    "b1_x1z": ("follower", SIG_FOLLOWER, lambda d: (d["n"], d["n"], d["n"])),
    "g0": ("costs", SIG_LEADER, lambda d: ()),
    "g0_x0": ("costs", SIG_LEADER, lambda d: (d["k"],)),
    "g0_u0": ("costs", SIG_LEADER, lambda d: (d["m0"],)),
    "g0_z": ("costs", SIG_LEADER, lambda d: (d["n"],)),
    "G0": ("costs", ("x0",), lambda d: ()),
    "G0_x0": ("costs", ("x0",), lambda d: (d["k"],)),
    "g1": ("costs", SIG_FOLLOWER, lambda d: ()),
    "g1_x1": ("costs", SIG_FOLLOWER, lambda d: (d["n"],)),
    "g1_u1": ("costs", SIG_FOLLOWER, lambda d: (d["m"],)),
    "g1_x0": ("costs", SIG_FOLLOWER, lambda d: (d["k"],)),
    "g1_u0": ("costs", SIG_FOLLOWER, lambda d: (d["m0"],)),
    "g1_z": ("costs", SIG_FOLLOWER, lambda d: (d["n"],)),
    "g1_x1x1": ("costs", SIG_FOLLOWER, lambda d: (d["n"], d["n"])),
    "g1_x1u1": ("costs", SIG_FOLLOWER, lambda d: (d["n"], d["m"])),
    "g1_x1x0": ("costs", SIG_FOLLOWER, lambda d: (d["n"], d["k"])),
    "g1_x1u0": ("costs", SIG_FOLLOWER, lambda d: (d["n"], d["m0"])),
    "g1_x1z": ("costs", SIG_FOLLOWER, lambda d: (d["n"], d["n"])),
    "G1": ("costs", ("x1",), lambda d: ()),
    "G1_x1": ("costs", ("x1",), lambda d: (d["n"],)),
    "G1_x1x1": ("costs", ("x1",), lambda d: (d["n"], d["n"])),
    "alpha1": ("stationarity", SIG_ALPHA, lambda d: (d["m"],)),
    "a1_x1": ("stationarity", SIG_ALPHA, lambda d: (d["m"], d["n"])),
    "a1_x0": ("stationarity", SIG_ALPHA, lambda d: (d["m"], d["k"])),
    "a1_u0": ("stationarity", SIG_ALPHA, lambda d: (d["m"], d["m0"])),
    "a1_z": ("stationarity", SIG_ALPHA, lambda d: (d["m"], d["n"])),
    "a1_p": ("stationarity", SIG_ALPHA, lambda d: (d["m"], d["n"])),
}

# derivative name -> (function it differentiates, argument)
DERIVATIVES = {
    "b0_x0": ("b0", "x0"), "b0_u0": ("b0", "u0"), "b0_z": ("b0", "z"),
    "b1_x1": ("b1", "x1"), "b1_u1": ("b1", "u1"), "b1_x0": ("b1", "x0"),
    "b1_u0": ("b1", "u0"), "b1_z": ("b1", "z"),
    "b1_x1x1": ("b1_x1", "x1"), "b1_x1u1": ("b1_x1", "u1"), "b1_x1x0": ("b1_x1", "x0"),
    "b1_x1u0": ("b1_x1", "u0"), "b1_x1z": ("b1_x1", "z"),
    "g0_x0": ("g0", "x0"), "g0_u0": ("g0", "u0"), "g0_z": ("g0", "z"),
    "G0_x0": ("G0", "x0"),
    "g1_x1": ("g1", "x1"), "g1_u1": ("g1", "u1"), "g1_x0": ("g1", "x0"),
    "g1_u0": ("g1", "u0"), "g1_z": ("g1", "z"),
    "g1_x1x1": ("g1_x1", "x1"), "g1_x1u1": ("g1_x1", "u1"), "g1_x1x0": ("g1_x1", "x0"),
    "g1_x1u0": ("g1_x1", "u0"), "g1_x1z": ("g1_x1", "z"),
    "G1_x1": ("G1", "x1"), "G1_x1x1": ("G1_x1", "x1"),
    "a1_x1": ("alpha1", "x1"), "a1_x0": ("alpha1", "x0"), "a1_u0": ("alpha1", "u0"),
    "a1_z": ("alpha1", "z"), "a1_p": ("alpha1", "p"),
}


@dataclass(frozen=True)
class GameSpec:
    """Leader/follower dynamics, costs, follower stationarity map and control sets.

    xi0(gen, R) returns (R, k) leader initial states; xi1(gen, shape) returns
    shape + (n,) follower initial states.  Both default to zeros.
    """

    leader: LeaderDynamics
    follower: FollowerDynamics
    costs: CostSpec
    stationarity: StationarityMap
    m0: int
    m: int
    project_u0: Callable = _identity
    project_u1: Callable = _identity
    xi0: Callable | None = None
    xi1: Callable | None = None
    name: str = "custom"

    def __post_init__(self):
        s0 = np.asarray(self.leader.sigma0, dtype=float)
        s1 = np.asarray(self.follower.sigma, dtype=float)
        if s0.ndim != 2 or s1.ndim != 2:
            raise ConfigError("sigma0 must be k x j0 and sigma must be n x j (use shape (0, 0) for no leader state)")
        object.__setattr__(self, "_sigma0", s0)
        object.__setattr__(self, "_sigma", s1)

    @property
    def sigma0(self) -> np.ndarray:
        return self._sigma0

    @property
    def sigma(self) -> np.ndarray:
        return self._sigma

    @property
    def dims(self) -> dict:
        return {"k": self.sigma0.shape[0], "j0": self.sigma0.shape[1],
                "n": self.sigma.shape[0], "j": self.sigma.shape[1],
                "m0": self.m0, "m": self.m}

    @property
    def deterministic(self) -> bool:
        return not (np.any(self.sigma0) or np.any(self.sigma))

    def has(self, name: str) -> bool:
        return self._fn(name) is not None

    def _fn(self, name):
        owner, _, _ = _REGISTRY[name]
        return getattr(getattr(self, owner), name)

    def call(self, name: str, *args):
        """Evaluate a registered callback with batch broadcasting."""
        owner, sig, shape = _REGISTRY[name]
        fn = getattr(getattr(self, owner), name)
        if fn is None:
            raise ConfigError(f"callback {name} is not supplied")
        if len(args) != len(sig):
            raise ConfigError(f"{name} expects arguments {sig}")
        arrs = [np.asarray(a, dtype=float) for a in args]
        lead = np.broadcast_shapes(*[a.shape if s == "t" else a.shape[:-1] for a, s in zip(arrs, sig)])
        arrs = [np.broadcast_to(a, lead if s == "t" else lead + a.shape[-1:]) for a, s in zip(arrs, sig)]
        out_shape = lead + shape(self.dims)
        if fn is ZERO:
            return np.zeros(out_shape)
        out = np.asarray(fn(*arrs), dtype=float)
        if out.shape != out_shape:
            out = np.broadcast_to(out, out_shape)
        return out

    def initial_leader(self, gen, R: int) -> np.ndarray:
        if self.xi0 is None:
            return np.zeros((R, self.dims["k"]))
        return np.asarray(self.xi0(gen, R), dtype=float).reshape(R, self.dims["k"])

    def initial_followers(self, gen, shape: tuple) -> np.ndarray:
        if self.xi1 is None:
            return np.zeros(tuple(shape) + (self.dims["n"],))
        return np.asarray(self.xi1(gen, tuple(shape)), dtype=float).reshape(tuple(shape) + (self.dims["n"],))


# ---------------------------------------------------------------------------
# Mean-field averages


@dataclass(frozen=True)
class ParticleEnsemble:
    """Follower copies: values has shape (R, M, n_steps + 1, d)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 4 or v.shape[2] != self.grid.n_steps + 1 or v.shape[1] < 1:
            raise ConfigError("ensemble values must have shape (R, M>=1, n_steps+1, d)")
        object.__setattr__(self, "values", v)


def empirical_average(states) -> np.ndarray:
    """Arithmetic mean of N state vectors (first axis).

    Computed as x_0 + mean(x - x_0), which is exact for identical states.
    """
    x = np.asarray(states, dtype=float)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ConfigError("empirical_average needs at least one state")
    return x[0] + (x - x[0]).sum(axis=0) / x.shape[0]


def conditional_mean(ensemble: ParticleEnsemble, k: int) -> np.ndarray:
    """E[x | F0_t] at node k: mean over particles inside each common realization, shape (R, d)."""
    if not 0 <= k <= ensemble.grid.n_steps:
        raise ConfigError(f"node {k} outside 0..{ensemble.grid.n_steps}")
    return ensemble.values[:, :, k, :].mean(axis=1)


def grand_mean(ensemble: ParticleEnsemble, k: int) -> np.ndarray:
    """Unconditional mean, defined through the tower property with equal weights."""
    return conditional_mean(ensemble, k).mean(axis=0)


# ---------------------------------------------------------------------------
# Hamiltonians


def hamiltonian_follower(spec: GameSpec, t, x1, u1, x0, u0, z, p) -> np.ndarray:
    """H1 = <p, b1> + g1."""
    b = spec.call("b1", t, x1, u1, x0, u0, z)
    return np.sum(np.asarray(p) * b, axis=-1) + spec.call("g1", t, x1, u1, x0, u0, z)


def follower_hamiltonian_u(spec: GameSpec, t, x1, u1, x0, u0, z, p) -> np.ndarray:
    """dH1/du1 = b1_u1^T p + g1_u1."""
    B = spec.call("b1_u1", t, x1, u1, x0, u0, z)
    return np.einsum("...im,...i->...m", B, np.asarray(p, dtype=float)) + spec.call(
        "g1_u1", t, x1, u1, x0, u0, z)


def projected_gradient_residual(u, grad, project) -> np.ndarray:
    """|u - P(u - grad)|: the first-order optimality defect over a convex set."""
    u = np.asarray(u, dtype=float)
    return np.linalg.norm(u - project(u - grad), axis=-1)


_NEEDED_FOR_LEADER = [
    "b0", "b0_x0", "b0_u0", "b0_z",
    "b1", "b1_x1", "b1_u1", "b1_x0", "b1_u0", "b1_z",
    "b1_x1x1", "b1_x1u1", "b1_x1x0", "b1_x1u0", "b1_x1z",
    "g0", "g0_x0", "g0_u0", "g0_z", "G0", "G0_x0",
    "g1_x1", "g1_x1x1", "g1_x1u1", "g1_x1x0", "g1_x1u0", "g1_x1z",
    "G1_x1", "G1_x1x1",
    "alpha1", "a1_x1", "a1_x0", "a1_u0", "a1_z", "a1_p",
]


class LeaderCoefficients:
    """B1 = b1 and Phi = b1_x1^T p + g1_x1 with u1 replaced by alpha1, plus chain-rule partials."""

    def __init__(self, spec: GameSpec):
        missing = [s for s in _NEEDED_FOR_LEADER if not spec.has(s)]
        if missing:
            raise ConfigError("missing partial callbacks: " + ", ".join(missing))
        self.spec = spec

    def control(self, t, x1, x0, u0, z, p):
        return self.spec.call("alpha1", t, x1, x0, u0, z, p)

    def B1(self, t, x1, x0, u0, z, p):
        u1 = self.control(t, x1, x0, u0, z, p)
        return self.spec.call("b1", t, x1, u1, x0, u0, z)

    def Phi(self, t, x1, x0, u0, z, p):
        s = self.spec
        u1 = self.control(t, x1, x0, u0, z, p)
        J = s.call("b1_x1", t, x1, u1, x0, u0, z)
        return np.einsum("...ij,...i->...j", J, np.asarray(p, dtype=float)) + s.call(
            "g1_x1", t, x1, u1, x0, u0, z)

    def jacobians(self, t, x1, x0, u0, z, p) -> dict:
        """Partials of B1 and Phi in (x1, x0, u0, z, p), keyed 'B1_x1', 'Phi_p', ..."""
        s = self.spec
        p = np.asarray(p, dtype=float)
        args = (t, x1, x0, u0, z, p)
        u1 = s.call("alpha1", *args)
        a = {w: s.call("a1_" + w, *args) for w in ("x1", "x0", "u0", "z", "p")}
        fargs = (t, x1, u1, x0, u0, z)
        bu = s.call("b1_u1", *fargs)
        out = {"B1": s.call("b1", *fargs)}
        for w in ("x1", "x0", "u0", "z"):
            out["B1_" + w] = s.call("b1_" + w, *fargs) + bu @ a[w]
        out["B1_p"] = bu @ a["p"]
        bx = s.call("b1_x1", *fargs)
        out["Phi"] = np.einsum("...ij,...i->...j", bx, p) + s.call("g1_x1", *fargs)

        def S(w):
            return np.einsum("...ijl,...i->...jl", s.call("b1_x1" + w, *fargs), p) + s.call(
                "g1_x1" + w, *fargs)

        Su = S("u1")
        for w in ("x1", "x0", "u0", "z"):
            out["Phi_" + w] = S(w) + Su @ a[w]
        out["Phi_p"] = np.swapaxes(bx, -1, -2) + Su @ a["p"]
        out["u1"] = u1
        return out


def assemble_leader_coefficients(spec: GameSpec) -> LeaderCoefficients:
    return LeaderCoefficients(spec)


def leader_hamiltonian_terms(spec: GameSpec, coeffs: LeaderCoefficients, t, x1, x0, u0, z, p,
                             K0, K1, phi) -> dict:
    """H0 and its partials in (x0, x1, z, u0, p)."""
    jac = coeffs.jacobians(t, x1, x0, u0, z, p)
    largs = (t, x0, u0, z)
    b0 = spec.call("b0", *largs)
    K0 = np.asarray(K0, dtype=float)
    K1 = np.asarray(K1, dtype=float)
    phi = np.asarray(phi, dtype=float)

    def tr(A, v):
        return np.einsum("...ij,...i->...j", A, v)

    H = (np.sum(K0 * b0, axis=-1) + np.sum(K1 * jac["B1"], axis=-1)
         - np.sum(phi * jac["Phi"], axis=-1) + spec.call("g0", *largs))
    out = {"H": H, "jac": jac}
    out["x0"] = (tr(spec.call("b0_x0", *largs), K0) + tr(jac["B1_x0"], K1)
                 - tr(jac["Phi_x0"], phi) + spec.call("g0_x0", *largs))
    out["x1"] = tr(jac["B1_x1"], K1) - tr(jac["Phi_x1"], phi)
    out["z"] = (tr(spec.call("b0_z", *largs), K0) + tr(jac["B1_z"], K1)
                - tr(jac["Phi_z"], phi) + spec.call("g0_z", *largs))
    out["u0"] = (tr(spec.call("b0_u0", *largs), K0) + tr(jac["B1_u0"], K1)
                 - tr(jac["Phi_u0"], phi) + spec.call("g0_u0", *largs))
    out["p"] = tr(jac["B1_p"], K1) - tr(jac["Phi_p"], phi)
    return out


def hamiltonian_leader(spec: GameSpec, t, x1, x0, u0, z, p, K0, K1, phi) -> np.ndarray:
    """H0 = <K0, b0> + <K1, B1> - <phi, Phi> + g0."""
    coeffs = assemble_leader_coefficients(spec)
    return leader_hamiltonian_terms(spec, coeffs, t, x1, x0, u0, z, p, K0, K1, phi)["H"]


# ---------------------------------------------------------------------------
# Sampled assumption checks


@dataclass
class SamplingBox:
    """Per-argument sampling ranges; a scalar r means the cube [-r, r]."""

    t: tuple = (0.0, 1.0)
    x1: object = 5.0
    x0: object = 5.0
    u1: object = 5.0
    u0: object = 5.0
    z: object = 5.0
    p: object = 10.0

    def draw(self, gen, name: str, size: int, dim: int | None) -> np.ndarray:
        if name == "t":
            return gen.uniform(self.t[0], self.t[1], size)
        lo, hi = _bounds(getattr(self, name), dim)
        return lo + (hi - lo) * gen.random((size, dim))


def _bounds(spec, dim):
    if isinstance(spec, (int, float)):
        return -float(spec) * np.ones(dim), float(spec) * np.ones(dim)
    lo, hi = spec
    return np.broadcast_to(np.asarray(lo, float), (dim,)), np.broadcast_to(np.asarray(hi, float), (dim,))


@dataclass
class AssumptionReport:
    samples: int
    box: SamplingBox
    fd_error: dict = field(default_factory=dict)
    growth_ratio: dict = field(default_factory=dict)
    derivative_norm: dict = field(default_factory=dict)
    stationarity_residual: float = 0.0
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


_ARG_DIM = {"x1": "n", "u1": "m", "x0": "k", "u0": "m0", "z": "n", "p": "n"}
_GROWTH = {"b0": 1, "b1": 1, "g0": 2, "g1": 2, "G0": 2, "G1": 2}


def validate_assumptions(spec: GameSpec, box: SamplingBox | None = None, samples: int = 1000,
                         seed: int = 0, fd_tol: float = 1e-5, growth_limit: float = 100.0,
                         stationarity_tol: float = 1e-8) -> AssumptionReport:
    """Finite-difference, growth and stationarity checks on sampled points.

    Passing is evidence over the sampled box, not a proof.
    """
    box = box or SamplingBox()
    gen = np.random.default_rng(seed)
    dims = spec.dims
    pts = {"t": box.draw(gen, "t", samples, None)}
    for a, d in _ARG_DIM.items():
        pts[a] = box.draw(gen, a, samples, dims[d])
    rep = AssumptionReport(samples, box)

    for dname, (base, wrt) in DERIVATIVES.items():
        fn = spec._fn(dname)
        if fn is None or spec._fn(base) is None:
            continue
        _, sig, _ = _REGISTRY[dname]
        args = [pts[s] for s in sig]
        an = spec.call(dname, *args)
        if dims[_ARG_DIM[wrt]] == 0:
            continue
        idx = sig.index(wrt)
        x = args[idx]
        eps = 1e-6 * (1.0 + np.abs(x))
        fd = np.empty(an.shape)
        for c in range(x.shape[-1]):
            xp, xm = x.copy(), x.copy()
            xp[:, c] += eps[:, c]
            xm[:, c] -= eps[:, c]
            ap, am = list(args), list(args)
            ap[idx], am[idx] = xp, xm
            col = (spec.call(base, *ap) - spec.call(base, *am)) / (2 * eps[:, c]).reshape(
                (-1,) + (1,) * (an.ndim - 2))
            fd[..., c] = col
        err = np.abs(fd - an) / (1.0 + np.abs(an))
        flat = err.reshape(samples, -1).max(axis=1, initial=0.0) if err.size else np.zeros(samples)
        worst = int(np.argmax(flat))
        rep.fd_error[dname] = float(flat[worst])
        rep.derivative_norm[dname] = float(np.abs(an).reshape(samples, -1).max()) if an.size else 0.0
        if flat[worst] > fd_tol:
            rep.violations.append({"check": "finite-difference", "symbol": dname,
                                   "error": float(flat[worst]),
                                   "witness": {s: _tolist(a[worst]) for s, a in zip(sig, args)}})

    for name, power in _GROWTH.items():
        if not spec.has(name):
            continue
        _, sig, _ = _REGISTRY[name]
        args = [pts[s] for s in sig]
        val = np.abs(spec.call(name, *args)).reshape(samples, -1).max(axis=1, initial=0.0)
        size = sum(np.sum(np.asarray(a) ** 2, axis=-1) if s != "t" else 0 for s, a in zip(sig, args))
        ratio = val / (1.0 + size) ** (power / 2.0)
        worst = int(np.argmax(ratio))
        rep.growth_ratio[name] = float(ratio[worst])
        if ratio[worst] > growth_limit:
            rep.violations.append({"check": "growth", "symbol": name, "ratio": float(ratio[worst]),
                                   "witness": {s: _tolist(a[worst]) for s, a in zip(sig, args)}})

    if spec.has("alpha1") and spec.has("b1_u1") and spec.has("g1_u1"):
        args = [pts[s] for s in SIG_ALPHA]
        u1 = spec.call("alpha1", *args)
        g = follower_hamiltonian_u(spec, pts["t"], pts["x1"], u1, pts["x0"], pts["u0"], pts["z"], pts["p"])
        res = projected_gradient_residual(u1, g, spec.project_u1)
        worst = int(np.argmax(res)) if res.size else 0
        rep.stationarity_residual = float(res[worst]) if res.size else 0.0
        if rep.stationarity_residual > stationarity_tol:
            rep.violations.append({"check": "stationarity", "symbol": "alpha1",
                                   "residual": rep.stationarity_residual,
                                   "witness": {s: _tolist(a[worst]) for s, a in zip(SIG_ALPHA, args)}})
    return rep


def _tolist(a):
    return np.asarray(a).tolist()


def newton_stationarity(spec: GameSpec, t, x1, x0, u0, z, p, starts, tol: float = 1e-12,
                        max_iter: int = 50) -> tuple[np.ndarray, list]:
    """Solve dH1/du1 = 0 at one point by projected Newton from several starts.

    Returns the root with the smallest H1 and the list of distinct roots found.
    The Jacobian of dH1/du1 is taken by central differences.
    """
    roots = []
    m = spec.m
    for u in np.atleast_2d(np.asarray(starts, dtype=float)):
        u = spec.project_u1(u.copy())
        for _ in range(max_iter):
            g = follower_hamiltonian_u(spec, t, x1, u, x0, u0, z, p)
            if np.linalg.norm(g) <= tol:
                break
            J = np.empty((m, m))
            for c in range(m):
                e = np.zeros(m)
                e[c] = 1e-6 * (1.0 + abs(u[c]))
                J[:, c] = (follower_hamiltonian_u(spec, t, x1, u + e, x0, u0, z, p)
                           - follower_hamiltonian_u(spec, t, x1, u - e, x0, u0, z, p)) / (2 * e[c])
            try:
                step = np.linalg.solve(J, g)
            except np.linalg.LinAlgError:
                break
            u = spec.project_u1(u - step)
        g = follower_hamiltonian_u(spec, t, x1, u, x0, u0, z, p)
        if projected_gradient_residual(u, g, spec.project_u1) <= 1e-8 and not any(
                np.linalg.norm(u - r) < 1e-6 for r in roots):
            roots.append(u)
    if not roots:
        raise StationarityError("Newton found no stationary point",
                                point=[np.asarray(a).tolist() for a in (t, x1, x0, u0, z, p)])
    H = [float(hamiltonian_follower(spec, t, x1, r, x0, u0, z, p)) for r in roots]
    return roots[int(np.argmin(H))], roots
