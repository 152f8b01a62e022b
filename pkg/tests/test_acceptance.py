"""Acceptance criteria 1-9 at their stated tolerances.

Each criterion records one PASS/FAIL line that is printed after the run.
Run standalone with ``python3 tests/test_acceptance.py``.
"""

import hashlib
import json
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest
from conftest import ACCEPTANCE

from mfstackelberg import fbsde
from mfstackelberg.audit import DeviationSpec, epsilon_curves
from mfstackelberg.numerics import RngSpec, make_grid, make_noise
from mfstackelberg.stackelberg import (
    ControlProfile, EnsembleConfig, follower_stationarity_residual, leader_cost, leader_gradient,
    solve_leader_adjoint, solve_leader_state,
)
from mfstackelberg.unicycle import (
    UnicycleParams, check_apriori_bounds, follower_cost_open_loop, grid_search_follower,
    solve_unicycle_follower, solve_unicycle_leader_bvp, unicycle_game_spec,
)

SEED = 20240611
DIGESTS = {}


@contextmanager
def criterion(key, title):
    info = {}
    try:
        yield info
    except BaseException:
        ACCEPTANCE[key] = (False, f"{title}  {json.dumps(info, default=float)}")
        raise
    ACCEPTANCE[key] = (True, f"{title}  {json.dumps(info, default=float)}")


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def problem_noise(name, n_steps, workers):
    """Shipped test problem with its noise regenerated at the given worker count."""
    prob, grid, noise = fbsde.test_problem(name, n_steps=n_steps)
    if noise is not None:
        noise = make_noise(grid, noise.R, noise.M, 1, 1, RngSpec(7), workers=workers)
    return prob, grid, noise


# --- criterion runners (pure functions of the seed and worker count) --------

def run_c1():
    ns = (1000, 2000, 4000, 8000)
    out = {"picard": [], "continuation": []}
    paths = []
    for n in ns:
        g = make_grid(1.0, n)
        Xo, Yo = fbsde.riccati_lq_oracle(0.0, 1.0, 1.0, 1.0, g).path(1.0)
        prob = fbsde.lq_problem()
        for name, sol in (("picard", fbsde.solve_picard(prob, g, tol=1e-12)),
                          ("continuation", fbsde.solve_continuation(
                              prob, g, fbsde.ContinuationSchedule(tol=1e-12)))):
            X, Y = sol.X[0, 0, :, 0], sol.Y[0, 0, :, 0]
            out[name].append(float(max(np.abs(X - Xo).max(), np.abs(Y - Yo).max())))
            paths += [X, Y]
    return out, digest(*paths)


def run_c2(workers=1):
    ratios, arrays = {}, []
    for name in fbsde.SHIPPED_MONOTONE:
        prob, g, noise = problem_noise(name, 100, workers)
        sol = fbsde.solve_continuation(prob, g, None, noise)
        ratios[name] = sol.diagnostics["contraction_factor"]
        arrays += [sol.X, sol.Y]
    prob, g, _ = fbsde.test_problem("lq")
    fit = fbsde.fit_stage_constant(prob, g)
    stage = fbsde.stage_contraction(prob, g, fit["delta_star"])
    return ratios, fit["K"], stage["ratio"], digest(*arrays, [stage["ratio"], fit["K"]])


def run_c3(workers=1, tol=1e-10):
    dist, arrays = {}, []
    for name in fbsde.SHIPPED_MONOTONE:
        prob, g, noise = problem_noise(name, 100, workers)
        a = fbsde.solve_picard(prob, g, noise, guess=fbsde.random_guess(prob, g, noise, 1), tol=tol)
        b = fbsde.solve_picard(prob, g, noise, guess=fbsde.random_guess(prob, g, noise, 2), tol=tol)
        dist[name] = fbsde.norm38(a, b)
        arrays += [a.Y, b.Y]
    return dist, digest(*arrays)


def run_c4(workers=1):
    P = UnicycleParams(sigma=0.5)
    g = make_grid(1.0, 100)
    u0 = ControlProfile(0.3 * np.sin(np.pi * g.t)[:, None])
    sol = solve_unicycle_follower(u0, P, EnsembleConfig(1, 2000, SEED, workers=workers), g)
    stoch = (sol.control_residual(), float(follower_stationarity_residual(sol.mp, unicycle_game_spec(P)).max()))
    det = solve_unicycle_follower(u0, P.replace(sigma=0.0), None, g)
    dres = (det.control_residual(),
            float(follower_stationarity_residual(det.mp, unicycle_game_spec(P.replace(sigma=0.0))).max()))
    # brute force on a short horizon, several leader controls
    Q = P.replace(sigma=0.0, T=0.2)
    gs_g = make_grid(0.2, 40)
    searches = []
    for amp in (0.0, 0.3, -1.0):
        lead = amp * np.sin(np.pi * gs_g.t / 0.2)
        fs = solve_unicycle_follower(ControlProfile(lead[:, None]), Q, None, gs_g)
        u = fs.u[0, 0, :40]
        J = float(follower_cost_open_loop(Q, lead, u[None], fs.mp.z[0], gs_g)[0])
        span = max(np.ptp(u), 1e-3)
        levels = np.linspace(u.min() - 0.5 * span, u.max() + 0.5 * span, 9)
        gs = grid_search_follower(Q, lead, fs.mp.z[0], gs_g, levels)
        searches.append((J, gs["cost"], gs["resolution"]))
    return stoch, dres, searches, digest(sol.u, sol.p, det.u, searches)


def run_c5():
    P = UnicycleParams()
    spec = unicycle_game_spec(P)
    g = make_grid(1.0, 200)
    u = ControlProfile(0.3 * np.sin(np.pi * g.t)[:, None])
    st = solve_leader_state(u, spec, None, g)
    gr = leader_gradient(u, st, solve_leader_adjoint(st, u, spec, g), spec, g)
    gen = np.random.default_rng(SEED)
    rho = 1e-4

    def J(vals):
        w = ControlProfile(vals)
        return leader_cost(spec, w, solve_leader_state(w, spec, None, g))

    errs = []
    for _ in range(10):
        v = gen.standard_normal((201, 1))
        fd = (J(u.values + rho * v) - J(u.values - rho * v)) / (2 * rho)
        ad = g.h * np.sum(gr[:200] * v[:200])
        errs.append(abs(fd - ad) / abs(fd))
    return errs, digest(gr, errs)


def run_c6():
    P = UnicycleParams()
    sol = solve_unicycle_leader_bvp(P)
    rep = check_apriori_bounds(sol)
    trivial = []
    for kw in ({}, {"v": 2.0, "T": 0.5}, {"d0": 3.0, "d1": 0.2, "a": -1.0}):
        Q = P.replace(c0=0.0, c1=0.0, e1=0.0, **kw)
        s = solve_unicycle_leader_bvp(Q)
        trivial.append((bool(np.all(s.u0 == 0) and np.all(s.u1 == 0)),
                        float(np.max(np.abs(s.x - Q.v * s.grid.t))), float(np.max(np.abs(s.y))),
                        float(np.max(np.abs(s.theta)))))
    return sol, rep, trivial, digest(sol.u0, sol.x, sol.y, sol.K)


def run_audit(workers=1):
    P = UnicycleParams(sigma=0.5)
    spec = unicycle_game_spec(P)
    g = make_grid(1.0, 50)
    bvp = solve_unicycle_leader_bvp(P.replace(sigma=0.0), g)
    u_dag = ControlProfile(bvp.u0[:, None])
    alts = {f"scale={c:g}": ControlProfile(c * bvp.u0[:, None]) for c in (0.0, 0.5)}
    devs = [DeviationSpec(None, 0, "self"), DeviationSpec(ControlProfile.zeros(g, 1), 0, "zero"),
            DeviationSpec(ControlProfile(np.full((51, 1), 2.0)), 0, "constant-2")]
    ens = EnsembleConfig(1, 10000, SEED, 2, workers)
    return epsilon_curves([8, 32, 128], spec, u_dag, alts, g, 1000, ens, devs, RngSpec(SEED), workers=workers)


def audit_digest(rep):
    return hashlib.sha256(json.dumps(rep.to_dict(), sort_keys=True, default=float).encode()).hexdigest()


@pytest.fixture(scope="module")
def audit():
    t0 = time.perf_counter()
    rep = run_audit()
    return rep, time.perf_counter() - t0


# --- criteria ----------------------------------------------------------------

def test_criterion_1_lq_oracle():
    with criterion(1, "LQ oracle: picard and continuation vs Riccati") as info:
        t0 = time.perf_counter()
        errs, DIGESTS[1] = run_c1()
        info["seconds"] = time.perf_counter() - t0
        info["errors"] = errs
        for name, e in errs.items():
            assert e[0] <= 1e-3, name
            ratios = np.array(e[1:]) / np.array(e[:-1])
            info[name + "_ratios"] = ratios.tolist()
            assert np.all((ratios >= 0.4) & (ratios <= 0.6)), name
        assert info["seconds"] < 10


def test_criterion_2_contraction():
    with criterion(2, "contraction audit") as info:
        ratios, K, stage, DIGESTS[2] = run_c2()
        info.update(ratios=ratios, K=K, ratio_at_third_over_K=stage)
        assert all(r <= 0.9 for r in ratios.values())
        assert stage <= 0.55


def test_criterion_3_uniqueness():
    tol = 1e-10
    with criterion(3, "uniqueness from random initial guesses") as info:
        dist, DIGESTS[3] = run_c3(tol=tol)
        info["norm38"] = dist
        assert all(d <= 10 * tol for d in dist.values())


def test_criterion_4_follower_stationarity():
    with criterion(4, "follower stationarity and brute force") as info:
        t0 = time.perf_counter()
        stoch, det, searches, DIGESTS[4] = run_c4()
        info.update(seconds=time.perf_counter() - t0, stochastic=stoch, deterministic=det, searches=searches)
        for ctrl, grad in (stoch, det):
            assert ctrl <= 1e-12 and grad <= 1e-8
        for J, best, resolution in searches:
            assert best >= J - resolution
        assert info["seconds"] < 30


def test_criterion_5_leader_gradient():
    with criterion(5, "leader gradient vs central differences") as info:
        t0 = time.perf_counter()
        errs, DIGESTS[5] = run_c5()
        info.update(seconds=time.perf_counter() - t0, max_rel_error=max(errs))
        assert max(errs) <= 1e-4
        assert info["seconds"] < 60


def test_criterion_6_unicycle_bvp():
    with criterion(6, "unicycle boundary-value problem") as info:
        t0 = time.perf_counter()
        sol, rep, trivial, DIGESTS[6] = run_c6()
        info.update(seconds=time.perf_counter() - t0, pins=max(sol.pins().values()),
                    stationarity=sol.stationarity(), apriori=rep.margins, trivial=trivial)
        assert max(sol.pins().values()) <= 1e-8
        assert sol.stationarity() <= 1e-10
        assert rep.passed
        for zero, dx, dy, dth in trivial:
            assert zero and dx <= 1e-12 and dy == 0.0 and dth == 0.0
        assert info["seconds"] < 30


def test_criterion_7_epsilon_nash(audit):
    rep, seconds = audit
    with criterion(7, "epsilon-Nash decay") as info:
        info.update(seconds=seconds, slope=rep.slopes["chaos_gap"],
                    follower_gap=rep.series("follower_gap")[1].tolist(),
                    chaos_gap=rep.series("chaos_gap")[1].tolist())
        assert rep.strictly_decreasing("follower_gap")
        assert rep.strictly_decreasing("chaos_gap")
        assert -1.0 <= rep.slopes["chaos_gap"] <= -0.25
        assert seconds < 300


def test_criterion_8_leader_audit(audit):
    rep, _ = audit
    with criterion(8, "epsilon-Stackelberg leader audit") as info:
        info["leader_gap"] = rep.series("leader_gap")[1].tolist()
        info["leader_advantage"] = [r["leader_advantage"] for r in rep.records]
        assert rep.strictly_decreasing("leader_gap")
        for r in rep.records:
            assert r["leader_within_envelope"], r["N"]
            for name, d in r["deviations"].items():
                assert d["within_envelope"], (r["N"], name)


def test_criterion_9_determinism(audit):
    with criterion(9, "byte-identical reruns across worker counts") as info:
        same = {}
        ref = dict(DIGESTS)
        for key, fn in ((1, lambda: run_c1()[1]), (5, lambda: run_c5()[1]), (6, lambda: run_c6()[3])):
            a = ref.get(key) or fn()
            same[key] = a == fn()
        for key, fn in ((2, lambda w: run_c2(w)[3]), (3, lambda w: run_c3(w)[1]), (4, lambda w: run_c4(w)[3])):
            a = ref.get(key) or fn(1)
            same[key] = a == fn(3)
        rep, _ = audit
        same["7-8"] = audit_digest(rep) == audit_digest(run_audit(workers=2))
        info.update(same)
        assert all(same.values())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
