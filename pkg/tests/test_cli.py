from __future__ import annotations

import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from lightchain.cli import main
from lightchain.sim import ChurnKind, ChurnModel, SimConfig

FILES = ["security.csv", "availability.csv", "efficiency.csv", "storage.csv", "messages.csv",
         "summary.json"]


@pytest.fixture
def tiny_config(tmp_path) -> Path:
    cfg = SimConfig(seed=5, slots=3, n_cap=80, arrival_rate=80, efficiency_extension=1,
                    churn=ChurnModel(kind=ChurnKind.WEIBULL), f=0.165)
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(cfg.to_json()))
    return p


def rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_plan_reports_both_modes(capsys):
    assert main(["plan"]) == 0
    out = json.loads(capsys.readouterr().out)
    rec, echo = out["recomputed"], out["paper"]
    assert rec["t_a"] == pytest.approx(4.545, abs=1e-3)
    assert rec["t_m"] == pytest.approx(12.987, abs=1e-3)
    assert (echo["alpha_min"], echo["t_m"], echo["t_h"]) == (9.61, 9.89, 10.08)
    assert out["discrepancy"]
    assert [r["t"] for r in out["table"]] == list(range(1, 13))


def test_plan_without_adversary_or_churn(capsys):
    assert main(["plan", "--f", "0", "--q", "0", "--alpha", "12"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["recomputed"]["t_range"] == [1, 12]


def test_plan_writes_files(tmp_path, capsys):
    j, c = tmp_path / "plan.json", tmp_path / "plan.csv"
    assert main(["plan", "--alphas", "10", "12", "--out", str(j), "--csv", str(c)]) == 0
    assert json.loads(j.read_text()) == json.loads(capsys.readouterr().out)
    table = rows(c)
    assert len(table) == 22 and {r["alpha"] for r in table} == {"10", "12"}


@pytest.mark.parametrize("argv", [
    ["plan", "--f", "-0.1"],
    ["plan", "--q", "1.0"],
    ["plan", "--alpha", "0"],
    ["plan", "--bogus"],
    ["nothing"],
])
def test_plan_usage_errors(argv, capsys):
    assert main(argv) == 2
    assert capsys.readouterr().out == ""


def test_simulate_is_byte_identical(tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", str(tiny_config), str(a)]) == 0
    assert main(["simulate", str(tiny_config), str(b)]) == 0
    for name in FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert [r["t"] for r in rows(a / "security.csv")] == [str(t) for t in range(1, 13)]


def test_seed_environment_override(tiny_config, tmp_path, monkeypatch):
    assert main(["simulate", str(tiny_config), str(tmp_path / "a")]) == 0
    monkeypatch.setenv("LIGHTCHAIN_SEED", "99")
    assert main(["simulate", str(tiny_config), str(tmp_path / "b")]) == 0
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert sa["config"]["seed"] == 5 and sb["config"]["seed"] == 99
    monkeypatch.setenv("LIGHTCHAIN_SEED", "x")
    assert main(["simulate", str(tiny_config), str(tmp_path / "c")]) == 2


def test_simulate_errors(tiny_config, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pov": {"t": 20, "alpha": 12}}))
    assert main(["simulate", str(bad), str(tmp_path / "o")]) == 2
    assert main(["simulate", str(tmp_path / "missing.json"), str(tmp_path / "o")]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["simulate", str(tiny_config), str(blocker / "out")]) == 3


def test_sweep_all_thresholds(tiny_config, tmp_path):
    out = tmp_path / "sw"
    spec = json.dumps({"alpha": [12], "t": "all", "seed": [1, 2]})
    assert main(["sweep", str(tiny_config), spec, str(out)]) == 0
    sec = rows(out / "security.csv")
    assert len(sec) == 12
    assert {"runs", "mean", "ci_low", "ci_high"} <= set(sec[0])
    per_run = [rows(out / "runs" / f"a12_tall_s{s}" / "security.csv") for s in (1, 2)]
    for i, r in enumerate(sec):
        rates = [float(p[i]["rate"]) for p in per_run]
        assert float(r["mean"]) == pytest.approx(sum(rates) / 2)
        assert float(r["ci_low"]) <= float(r["mean"]) <= float(r["ci_high"])
        assert int(r["attempts"]) == sum(int(p[i]["attempts"]) for p in per_run)


def test_sweep_parallel_matches_serial(tiny_config, tmp_path):
    spec = json.dumps({"alpha": [10, 12], "t": [10], "seed": [1]})
    assert main(["sweep", str(tiny_config), spec, str(tmp_path / "j1")]) == 0
    assert main(["sweep", str(tiny_config), spec, str(tmp_path / "j2"), "--jobs", "2"]) == 0
    for name in ["security.csv", "availability.csv", "efficiency.csv", "messages.csv", "summary.json"]:
        assert (tmp_path / "j1" / name).read_bytes() == (tmp_path / "j2" / name).read_bytes()


@pytest.mark.parametrize("spec", ['{"alpha": [12], "t": [13]}', '{"beta": [1]}', "{not json",
                                  '{"alpha": []}'])
def test_sweep_bad_spec(tiny_config, tmp_path, spec):
    assert main(["sweep", str(tiny_config), spec, str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("fmt,expect", [("csv", "security.csv"), ("json", "report.json"),
                                        ("gnuplot-data", "security.dat")])
def test_report_formats_and_figures(tiny_config, tmp_path, fmt, expect, capsys):
    out = tmp_path / "run"
    assert main(["simulate", str(tiny_config), str(out)]) == 0
    assert main(["report", str(out), "--format", fmt]) == 0
    printed = capsys.readouterr().out.split()
    assert str(out / expect) in printed
    for fig in ["security.png", "availability.png", "efficiency.png", "storage.png"]:
        assert (out / fig).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_missing_dir(tmp_path):
    assert main(["report", str(tmp_path / "nothing")]) == 2


def test_console_script_runs():
    env = dict(os.environ)
    r = subprocess.run([sys.executable, "-m", "lightchain.cli", "plan", "--alpha", "12"],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 0 and json.loads(r.stdout)["params"]["alpha"] == 12
    r = subprocess.run([sys.executable, "-m", "lightchain.cli", "plan", "--f", "2"],
                       capture_output=True, text=True, env=env)
    assert r.returncode == 2 and r.stdout == "" and r.stderr.startswith("lightchain:")
