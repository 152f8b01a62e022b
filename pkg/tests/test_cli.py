import csv
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfstackelberg import cli
from mfstackelberg.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"


def write_scenario(tmp_path, data, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_unicycle_trivial_straight_line(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["unicycle", "--scenario", str(SCEN / "unicycle-trivial.json"), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["stages"]["unicycle-bvp"]["converged"] == "1 sweep"
    rows = read_csv(out / "trajectory.csv")
    assert rows[0] == ["t", "x", "y", "theta", "u0", "ui", "p13", "K13"]
    data = np.array(rows[1:], dtype=float)
    assert np.allclose(data[:, 1], data[:, 0], atol=1e-14)
    assert not np.any(data[:, 2:])


def test_epsilon_audit_row_contract(tmp_path):
    out = tmp_path / "o"
    args = ["epsilon-audit", "--scenario", str(SCEN / "epsilon-audit.json"), "--out", str(out),
            "--set", "audit.mc_reps=40", "--set", "audit.mp_particles=300", "--set", "grid.n_steps=10"]
    assert cli.main(args) == 0
    rows = read_csv(out / "curves.csv")
    assert rows[0] == ["N", "gap", "stderr", "quantity"]
    counts = {}
    for r in rows[1:]:
        counts[r[3]] = counts.get(r[3], 0) + 1
    for q in ("follower_gap", "leader_gap", "chaos_gap", "gain:self", "gain:zero"):
        assert counts[q] == 3
    assert sorted({float(r[0]) for r in rows[1:]}) == [8.0, 32.0, 128.0]


def test_unknown_key_is_config_error_without_outputs(tmp_path):
    scen = write_scenario(tmp_path, {"family": "unicycle", "colour": "red"})
    out = tmp_path / "o"
    assert cli.main(["unicycle", "--scenario", scen, "--out", str(out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_unknown_param_is_config_error(tmp_path):
    scen = write_scenario(tmp_path, {"family": "unicycle", "params": {"speed": 2}})
    assert cli.main(["unicycle", "--scenario", scen, "--out", str(tmp_path / "o")]) == 2


def test_unwritable_output_fails_before_solving(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = cli.main(["unicycle", "--scenario", str(SCEN / "unicycle.json"), "--out", str(blocker / "sub")])
    assert code == 2


def test_divergence_exit_code(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["solve-fbsde", "--scenario", str(SCEN / "lq-test.json"), "--out", str(out),
                     "--set", "solver.max_iter=3", "--set", "solver.tol=1e-14"])
    assert code == 3


def test_budget_exit_code(tmp_path):
    code = cli.main(["solve-fbsde", "--scenario", str(SCEN / "lq-test.json"), "--out", str(tmp_path / "o"),
                     "--set", "budget=10"])
    assert code == 4


def test_summary_and_manifest_validate(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["solve-fbsde", "--scenario", str(SCEN / "lq-test.json"), "--out", str(out),
                     "--set", "grid.n_steps=100"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    jsonschema.validate(summary, cli.load_schema("summary.schema.json"))
    jsonschema.validate(manifest, cli.load_schema("manifest.schema.json"))
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    # every resolved parameter is recorded
    assert manifest["config"]["solver"]["damping"] == 0.5
    assert manifest["config"]["params"]["r_T"] == 1.0
    assert summary["results"]["oracle_max_error"] <= 10 * 0.01


def test_same_seed_same_bytes(tmp_path):
    digests = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert cli.main(["follower", "--scenario", str(SCEN / "unicycle-follower.json"), "--out", str(out),
                         "--seed", "11", "--set", "ensemble.M=200", "--set", "grid.n_steps=20"]) == 0
        digests.append({k: v for k, v in json.loads((out / "manifest.json").read_text())["outputs"].items()})
    assert digests[0] == digests[1]


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip(x):
    assert float(cli.fmt(x)) == x
    row = cli.csv_bytes(["v"], [(x,)]).decode().splitlines()[1]
    assert np.float64(row).tobytes() == np.float64(x).tobytes()


def test_override_parsing():
    cfg = {}
    cli.apply_override(cfg, *cli.parse_override("a.b=3"))
    cli.apply_override(cfg, *cli.parse_override("a.c=text"))
    assert cfg == {"a": {"b": 3, "c": "text"}}
    with pytest.raises(ConfigError):
        cli.parse_override("novalue")


def test_resolve_config_defaults_and_family_checks():
    cfg = cli.resolve_config("unicycle", {"family": "unicycle"}, None, [])
    assert cfg["seed"] == cli.DEFAULT_SEED
    assert cfg["grid"]["n_steps"] == 200 and cfg["params"]["v"] == 1.0
    with pytest.raises(ConfigError):
        cli.resolve_config("unicycle", {"family": "lq"}, None, [])
    with pytest.raises(ConfigError):
        cli.resolve_config("solve-fbsde", {"family": "unicycle"}, None, [])
    with pytest.raises(ConfigError):
        cli.resolve_config("validate", {"family": "unicycle"}, -5, [])


@pytest.mark.parametrize("scenario,command", [("unicycle.json", "validate"), ("conditional-lq.json", "validate")])
def test_validate_command(tmp_path, scenario, command):
    out = tmp_path / "o"
    assert cli.main([command, "--scenario", str(SCEN / scenario), "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["results"]["passed"] is True


def test_console_entry_point(tmp_path):
    out = tmp_path / "o"
    res = subprocess.run([sys.executable, "-m", "mfstackelberg.cli", "unicycle", "--scenario",
                          str(SCEN / "unicycle-trivial.json"), "--out", str(out)],
                         capture_output=True, text=True, env=dict(os.environ))
    assert res.returncode == 0, res.stderr
    assert "trajectory.csv" in json.loads(res.stdout)["outputs"]
