"""Scenario runner: ``mfstackelberg <command> --scenario s.json --out dir [--seed N] [--set k=v ...]``.

Exit codes: 0 ok, 2 configuration or I/O error, 3 solver divergence, 4 budget refusal.
Outputs are written only after every computation has finished.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import shutil
import sys
import tempfile
import time
from importlib import resources

import jsonschema
import numpy as np

from . import __version__, kernels
from .errors import BudgetError, ConfigError, MfsgError
from .numerics import DEFAULT_SEED, RngSpec, make_grid

COMMANDS = ("solve-fbsde", "follower", "leader", "unicycle", "epsilon-audit", "validate")
FBSDE_FAMILIES = ("lq-test", "lq", "beta-family", "tau-branch", "nonlinear", "conditional-lq")
GAME_FAMILIES = ("unicycle",)
DEFAULT_BUDGET = 2e9


def load_schema(name: str) -> dict:
    return json.loads(resources.files("mfstackelberg").joinpath("schemas", name).read_text("utf-8"))


def fmt(x) -> str:
    """17 significant digits: exact round trip for float64."""
    return format(float(x), ".17g")


def csv_bytes(header, rows) -> bytes:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in row))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def json_bytes(obj) -> bytes:
    return (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# configuration


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(cfg: dict, key: str, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


def resolve_config(command: str, scenario: dict, seed: int | None, overrides) -> dict:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = copy.deepcopy(scenario)
    for item in overrides or []:
        apply_override(cfg, *parse_override(item))
    try:
        jsonschema.validate(cfg, load_schema("scenario.schema.json"))
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"scenario invalid at {path}: {exc.message}") from None
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", DEFAULT_SEED)
    RngSpec(cfg["seed"])
    fam = cfg["family"]
    if command == "solve-fbsde" and fam not in FBSDE_FAMILIES:
        raise ConfigError(f"solve-fbsde needs a family in {FBSDE_FAMILIES}, got {fam!r}")
    if command in ("follower", "leader", "unicycle", "epsilon-audit") and fam not in GAME_FAMILIES:
        raise ConfigError(f"{command} needs a family in {GAME_FAMILIES}, got {fam!r}")
    if command == "validate" and fam not in FBSDE_FAMILIES + GAME_FAMILIES:
        raise ConfigError(f"unknown family {fam!r}")
    cfg.setdefault("budget", DEFAULT_BUDGET)
    cfg.setdefault("grid", {})
    cfg.setdefault("ensemble", {})
    cfg.setdefault("solver", {})
    cfg.setdefault("params", {})
    if fam == "unicycle":
        from .unicycle import UnicycleParams
        cfg["params"] = UnicycleParams.from_dict(cfg["params"]).to_dict()
        cfg["grid"].setdefault("n_steps", 200)
    else:
        cfg["grid"].setdefault("n_steps", 1000 if fam in ("lq-test", "lq") else 100)
    ens = cfg["ensemble"]
    ens.setdefault("R", 1)
    ens.setdefault("M", 1)
    ens.setdefault("degree", 2)
    ens.setdefault("workers", 1)
    sol = cfg["solver"]
    sol.setdefault("method", "picard")
    sol.setdefault("tol", 1e-10)
    sol.setdefault("damping", 0.5)
    sol.setdefault("max_iter", 1000)
    if command == "epsilon-audit":
        aud = cfg.setdefault("audit", {})
        aud.setdefault("Ns", [8, 32, 128])
        aud.setdefault("mc_reps", 1000)
        aud.setdefault("mp_particles", 10000)
        aud.setdefault("alternatives", [0.0, 0.5])
    return cfg


def check_writable(out: str):
    try:
        os.makedirs(out, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out, prefix=".probe-"):
            pass
    except OSError as exc:
        raise ConfigError(f"output directory {out!r} is not writable: {exc}") from None


def _budget(cfg, work, what):
    if work > cfg["budget"]:
        raise BudgetError(f"{what} needs about {work:.3g} particle-steps; budget is {cfg['budget']:.3g}")


# ---------------------------------------------------------------------------
# pipelines: each returns (results, stage diagnostics, {filename: bytes})


def _fbsde_family(cfg):
    from .fbsde import lq_problem, riccati_lq_oracle, test_problem
    fam, n = cfg["family"], cfg["grid"]["n_steps"]
    if fam == "lq-test":
        p = {"a": 0.0, "b": 1.0, "q": 1.0, "r_T": 1.0, "x0": 1.0}
        unknown = set(cfg["params"]) - set(p)
        if unknown:
            raise ConfigError(f"unknown lq-test parameter(s): {sorted(unknown)}")
        p.update({k: float(v) for k, v in cfg["params"].items()})
        cfg["params"] = p
        grid = make_grid(1.0, n)
        oracle = riccati_lq_oracle(p["a"], p["b"], p["q"], p["r_T"], grid)
        return lq_problem(**p, name="lq-test"), grid, None, (oracle, p["x0"])
    if cfg["params"]:
        raise ConfigError(f"family {fam!r} takes no parameters")
    ens = cfg["ensemble"]
    prob, grid, noise = test_problem(fam, n_steps=n, particles=ens["M"] if ens["M"] > 1 else 64,
                                     commons=ens["R"] if ens["R"] > 1 else 8, seed=cfg["seed"])
    oracle = None
    if fam == "lq":
        oracle = (riccati_lq_oracle(0.0, 1.0, 1.0, 1.0, grid), 1.0)
    return prob, grid, noise, oracle


def run_solve_fbsde(cfg):
    from .fbsde import ContinuationSchedule, solution_residual, solve_continuation, solve_picard
    prob, grid, noise, oracle = _fbsde_family(cfg)
    s = cfg["solver"]
    R = 1 if noise is None else noise.R
    M = 1 if noise is None else noise.M
    _budget(cfg, R * M * grid.n_steps * s["max_iter"], "solve-fbsde")
    if s["method"] == "picard":
        sol = solve_picard(prob, grid, noise, damping=s["damping"], tol=s["tol"], max_iter=s["max_iter"],
                           degree=cfg["ensemble"]["degree"])
    else:
        sol = solve_continuation(prob, grid, ContinuationSchedule(tol=s["tol"], max_iter=s["max_iter"]), noise,
                                 degree=cfg["ensemble"]["degree"])
    res = {k: v for k, v in solution_residual(prob, sol, grid, noise).items() if not isinstance(v, np.ndarray)}
    results = {"iterations": sol.diagnostics["iterations"],
               "contraction_factor": sol.diagnostics["contraction_factor"], "residual": res}
    Xm = sol.X.mean(axis=(0, 1))
    Ym = sol.Y.mean(axis=(0, 1))
    header = ["t"] + [f"X{i + 1}" for i in range(prob.n1)] + [f"Y{i + 1}" for i in range(prob.m1)]
    cols = [grid.t, *Xm.T, *Ym.T]
    if oracle is not None:
        orc, x0 = oracle
        Xo, Yo = orc.path(x0)
        results["oracle_max_error"] = float(max(np.abs(Xm[:, 0] - Xo).max(), np.abs(Ym[:, 0] - Yo).max()))
        header += ["X_oracle", "Y_oracle"]
        cols += [Xo, Yo]
    diag = {k: v for k, v in sol.diagnostics.items() if k not in ("distances", "residual")}
    files = {"solution.csv": csv_bytes(header, np.column_stack(cols))}
    return results, {"fbsde": diag}, files


def _unicycle(cfg):
    from .unicycle import UnicycleParams, unicycle_game_spec
    P = UnicycleParams.from_dict(cfg["params"])
    return P, unicycle_game_spec(P), make_grid(P.T, cfg["grid"]["n_steps"])


def _ensemble(cfg):
    from .stackelberg import EnsembleConfig
    e = cfg["ensemble"]
    return EnsembleConfig(e["R"], e["M"], cfg["seed"], e["degree"], e["workers"])


def run_follower(cfg):
    from .stackelberg import ControlProfile, follower_stationarity_residual
    from .unicycle import solve_unicycle_follower
    P, spec, grid = _unicycle(cfg)
    ens = _ensemble(cfg).resolve(spec)
    s = cfg["solver"]
    _budget(cfg, ens.R * ens.M * grid.n_steps * s["max_iter"], "follower")
    u0 = ControlProfile.zeros(grid, 1)
    sol = solve_unicycle_follower(u0, P, ens, grid, tol=s["tol"], damping=s["damping"], max_iter=s["max_iter"])
    stat = follower_stationarity_residual(sol.mp, spec)
    results = {"control_residual": sol.control_residual(), "stationarity_max": float(stat.max()),
               "iterations": sol.mp.diagnostics["iterations"], "particles": ens.R * ens.M}
    mean = lambda a: a.mean(axis=(0, 1))  # noqa: E731
    cols = [grid.t, mean(sol.x), mean(sol.y), mean(sol.theta), mean(sol.w), mean(sol.u), mean(sol.p_next[..., 2])]
    files = {"follower.csv": csv_bytes(["t", "x", "y", "theta", "w", "ui", "p13_next"], np.column_stack(cols))}
    diag = {k: v for k, v in sol.mp.diagnostics.items() if k != "changes"}
    return results, {"follower": diag}, files


def run_leader(cfg):
    from .stackelberg import ControlProfile, leader_descent
    P, spec, grid = _unicycle(cfg)
    ens = _ensemble(cfg).resolve(spec)
    s = cfg["solver"]
    _budget(cfg, ens.R * ens.M * grid.n_steps * s["max_iter"], "leader")
    u0, cs = leader_descent(ControlProfile.zeros(grid, 1), spec, grid, ens, tol=max(s["tol"], 1e-6),
                            max_iter=min(s["max_iter"], 500), method=s["method"], damping=s["damping"])
    resid = cs.diagnostics["residual"]
    results = {"leader_cost": cs.diagnostics["trace"][-1]["J"], "iterations": cs.diagnostics["iterations"],
               "consistency": {k: v for k, v in resid.items() if k != "stationarity_node"}}
    files = {"control.csv": csv_bytes(["t", "u0"], np.column_stack([grid.t, u0.values[:, 0]]))}
    return results, {"descent": {"trace": cs.diagnostics["trace"]}}, files


def run_unicycle(cfg):
    from .unicycle import check_apriori_bounds, solve_unicycle_leader_bvp
    P, spec, grid = _unicycle(cfg)
    s = cfg["solver"]
    sol = solve_unicycle_leader_bvp(P, grid, tol=min(s["tol"], 1e-10), max_sweeps=max(s["max_iter"], 100),
                                    damping=s["damping"])
    rep = check_apriori_bounds(sol)
    sweeps = sol.diagnostics["sweeps"]
    results = {"pins": sol.pins(), "stationarity": sol.stationarity(), "defects": sol.defects(),
               "apriori": {"passed": rep.passed, "margins": rep.margins, "witness": rep.witness},
               "leader_cost": sol.leader_cost(), "method": sol.diagnostics["method"]}
    header, data = sol.trajectory()
    stage = {k: v for k, v in sol.diagnostics.items() if k != "changes"}
    stage["converged"] = f"{sweeps} sweep" + ("" if sweeps == 1 else "s")
    return results, {"unicycle-bvp": stage}, {"trajectory.csv": csv_bytes(header, data)}


def run_epsilon_audit(cfg):
    from .audit import DeviationSpec, epsilon_curves
    from .stackelberg import ControlProfile, EnsembleConfig
    from .unicycle import solve_unicycle_leader_bvp
    P, spec, grid = _unicycle(cfg)
    if P.sigma <= 0:
        raise ConfigError("epsilon-audit needs sigma > 0")
    a = cfg["audit"]
    n_alt = len(a["alternatives"])
    work = sum(a["mc_reps"] * N * grid.n_steps * (8 + 2 * n_alt) for N in a["Ns"])
    work += (1 + n_alt) * a["mp_particles"] * grid.n_steps * 100
    _budget(cfg, work, "epsilon-audit")
    bvp = solve_unicycle_leader_bvp(P.replace(sigma=0.0), grid)
    u_dag = ControlProfile(bvp.u0[:, None])
    alts = {f"scale={c:g}": ControlProfile(c * bvp.u0[:, None]) for c in a["alternatives"]}
    devs = [DeviationSpec(None, 0, "self"), DeviationSpec(ControlProfile.zeros(grid, 1), 0, "zero"),
            DeviationSpec(ControlProfile(np.full((grid.n_steps + 1, 1), 2.0)), 0, "constant-2")]
    ens = EnsembleConfig(1, a["mp_particles"], cfg["seed"], cfg["ensemble"]["degree"], cfg["ensemble"]["workers"])
    rep = epsilon_curves(a["Ns"], spec, u_dag, alts, grid, a["mc_reps"], ens, devs, RngSpec(cfg["seed"]),
                         budget=cfg["budget"], workers=cfg["ensemble"]["workers"])
    results = {"records": rep.records, "slopes": rep.slopes, "notes": rep.notes,
               "decreasing": {q: rep.strictly_decreasing(q) for q in ("follower_gap", "leader_gap", "chaos_gap")}}
    files = {"curves.csv": csv_bytes(["N", "gap", "stderr", "quantity"],
                                     [(float(N), g, se, q) for N, g, se, q in rep.rows()])}
    return results, {"bvp": {"method": bvp.diagnostics["method"], "sweeps": bvp.diagnostics["sweeps"]}}, files


def run_validate(cfg):
    fam = cfg["family"]
    if fam in GAME_FAMILIES:
        from .game import validate_assumptions
        _, spec, _ = _unicycle(cfg)
        rep = validate_assumptions(spec, seed=cfg["seed"] % (1 << 32))
        results = {"passed": rep.passed, "violations": rep.violations,
                   "stationarity_residual": rep.stationarity_residual,
                   "fd_error_max": max(rep.fd_error.values(), default=0.0)}
    else:
        from .fbsde import check_monotone
        prob, grid, noise, _ = _fbsde_family(cfg)
        rep = check_monotone(prob, grid, seed=cfg["seed"] % (1 << 32))
        results = {"passed": rep.passed, "flags": rep.flags, "values": rep.values, "note": rep.note}
    rows = [(k, v) for k, v in sorted(results.items()) if isinstance(v, (bool, int, float))]
    files = {"validation.csv": csv_bytes(["check", "value"], [(k, float(v)) for k, v in rows])}
    return results, {}, files


PIPELINES = {"solve-fbsde": run_solve_fbsde, "follower": run_follower, "leader": run_leader,
             "unicycle": run_unicycle, "epsilon-audit": run_epsilon_audit, "validate": run_validate}


def versions() -> dict:
    import numba
    import scipy
    return {"mfstackelberg": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "kernels": kernels.backend()}


def run(command: str, scenario_path: str, out: str, seed: int | None = None, overrides=()) -> dict:
    """Execute a pipeline and write summary.json, CSVs and manifest.json into `out`."""
    t0 = time.perf_counter()
    try:
        with open(scenario_path, encoding="utf-8") as fh:
            scenario = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario {scenario_path!r}: {exc}") from None
    if not isinstance(scenario, dict):
        raise ConfigError("scenario must be a JSON object")
    cfg = resolve_config(command, scenario, seed, overrides)
    check_writable(out)
    results, stages, files = PIPELINES[command](cfg)
    summary = {"command": command, "family": cfg["family"], "seed": cfg["seed"], "status": "ok",
               "config": cfg, "results": results, "outputs": sorted(files)}
    summary = _jsonable(summary)
    jsonschema.validate(summary, load_schema("summary.schema.json"))
    files["summary.json"] = json_bytes(summary)
    digests = {name: hashlib.sha256(data).hexdigest() for name, data in sorted(files.items())}
    manifest = _jsonable({"config": cfg, "versions": versions(), "stages": stages, "outputs": digests,
                          "wall_clock_seconds": time.perf_counter() - t0})
    jsonschema.validate(manifest, load_schema("manifest.schema.json"))
    files["manifest.json"] = json_bytes(manifest)
    # stage everything, then move into place
    stage_dir = tempfile.mkdtemp(prefix=".stage-", dir=out)
    try:
        for name, data in files.items():
            with open(os.path.join(stage_dir, name), "wb") as fh:
                fh.write(data)
        for name in files:
            os.replace(os.path.join(stage_dir, name), os.path.join(out, name))
    finally:
        shutil.rmtree(stage_dir, ignore_errors=True)
    return manifest


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfstackelberg", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--scenario", required=True, help="scenario JSON file")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help=f"RNG seed (default {DEFAULT_SEED})")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a scenario entry, e.g. params.c1=0 (repeatable)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = run(args.command, args.scenario, args.out, args.seed, args.overrides)
    except MfsgError as exc:
        print(f"mfstackelberg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps({"outputs": manifest["outputs"], "stages": list(manifest["stages"])}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
