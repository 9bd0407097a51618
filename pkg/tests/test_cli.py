import json
import subprocess
import sys

import pytest

from enskog.cli import run
from enskog.scenario import stock_path


def call(*argv, out=None):
    args = list(argv) + (["--out", str(out)] if out else [])
    return run(args)


def test_validate_stock_ok(capsys):
    assert call("validate", "--scenario", "head_on") == 0
    assert capsys.readouterr().out.startswith("index,diagnostic\r\n")


def test_validate_reports_overlap(tmp_path, capsys):
    d = json.loads(stock_path("head_on").read_text())
    d["initial"][1]["q"] = [1.1, 0, 0]
    p = tmp_path / "s.json"
    p.write_text(json.dumps(d))
    assert call("validate", "--scenario", str(p)) == 2
    assert "support separation violated" in capsys.readouterr().out


def test_parse_error_exit_code(tmp_path, capsys):
    p = tmp_path / "s.json"
    p.write_text("{\n\n  nope\n}")
    assert call("simulate", "--scenario", str(p)) == 2
    assert "line 3" in capsys.readouterr().err


def test_unknown_scenario(capsys):
    assert call("simulate", "--scenario", "no_such_thing") == 2


def test_bad_ladder_override(capsys):
    assert call("validate", "--scenario", "head_on", "--epsilon-ladder", "0.1,x") == 2


def test_reverse_needs_elastic(capsys):
    assert call("reverse", "--scenario", "head_on_inelastic") == 2


def test_simulate_writes_artifacts(tmp_path, capsys):
    assert call("simulate", "--scenario", "head_on", out=tmp_path) == 0
    doc = json.loads((tmp_path / "simulate.json").read_text())
    assert doc["command"] == "simulate" and doc["schema"] == 1
    assert len(doc["summary"]["events"]) == 1
    assert doc["summary"]["events"][0]["t"] == pytest.approx(1.0)
    body = (tmp_path / "simulate.csv").read_bytes()
    assert body.startswith(b"t,i,x,y,z,vx,vy,vz\r\n")


def test_conserve_inelastic_energy_loss(tmp_path, capsys):
    assert call("conserve", "--scenario", "head_on_inelastic", "--format", "json") == 0
    doc = json.loads(capsys.readouterr().out)
    row = doc["table"][0]
    assert row["energy_change"] == pytest.approx(row["expected_change"], abs=1e-12)
    assert doc["summary"]["max_energy_drift"] < 1e-12


def test_jacobian_inelastic(capsys):
    assert call("jacobian", "--scenario", "head_on_inelastic", "--format", "json") == 0
    vals = {r["quantity"]: r["value"] for r in json.loads(capsys.readouterr().out)["table"]}
    assert vals["window_position_det"] == pytest.approx(-2.0, abs=1e-2)
    assert vals["chi"] == pytest.approx(4.0, abs=1e-6)


def test_ge_check_rejects_three_spheres(capsys):
    assert call("ge-check", "--scenario", "billiard3") == 2


def test_threads_env_validated(monkeypatch, capsys):
    monkeypatch.setenv("ENSKOG_THREADS", "zero")
    assert call("simulate", "--scenario", "head_on") == 2


def test_repeated_runs_identical(tmp_path):
    bodies = []
    for k in range(2):
        out = tmp_path / str(k)
        subprocess.run([sys.executable, "-m", "enskog.cli", "simulate", "--scenario", "billiard3",
                        "--seed", "7", "--out", str(out)], check=True, capture_output=True)
        bodies.append((out / "simulate.csv").read_bytes())
    assert bodies[0] == bodies[1]
