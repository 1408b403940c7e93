import copy
import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from slowdecay.cli import main
from slowdecay.errors import ConfigError
from slowdecay.experiment import (
    ExperimentConfig,
    reports_from_grid,
    run_experiment,
    run_sweep,
    sha256,
    validate_config,
)

BOOSTED8 = {
    "model": {"family": "xxz", "lam": 0.0},
    "lattice": {"d": 1, "sides": [8], "boundary": "periodic"},
    "state": {"kind": "boosted_gibbs", "beta": 1.0, "boost_k": 1},
    "grid": {"t_count": 5, "with_norms": False, "wraparound_count": 2},
    # the default 1e-6 targets L >= 12; an 8-site ring drifts by a few 1e-6 before t_max
    "tolerances": {"sum_rule_tol": 1e-5},
}
ZERO8 = {
    "model": {"family": "xxz", "lam": 0.5},
    "lattice": {"sides": [8]},
    "state": {"kind": "gibbs", "beta": 0.5},
    "grid": {"t_count": 4},
}


def write(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def boosted_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("boosted")
    return run_experiment(ExperimentConfig.from_dict(BOOSTED8), out)


def test_minimal_config_validates():
    cfg = ExperimentConfig.from_dict({"model": {"family": "xxz", "lam": 0.0}, "lattice": {"sides": [8]},
                                      "state": {"kind": "gibbs"}})
    assert cfg.lattice.sides == (8,) and cfg.lattice.is_ring
    assert cfg.grid["t_count"] == 13 and cfg.tolerances["sum_rule_tol"] == 1e-6


def test_violations_are_all_listed():
    bad = {"model": {"family": "hubbard"}, "lattice": {"sides": [8]}, "state": {"kind": "gibbs", "beta": -1}}
    violations = validate_config(bad)
    assert "state.beta must be ≥ 0" in violations
    assert any(v.startswith("model.family") for v in violations)
    assert len(violations) == 2


def test_periodic_fermions_are_rejected():
    cfg = {"model": {"family": "tv_fermion", "T": 1.0}, "lattice": {"sides": [12]}, "state": {"kind": "gibbs"}}
    assert any("PeriodicFermionUnsupported" in v for v in validate_config(cfg))
    cfg["lattice"]["boundary"] = "open"
    assert validate_config(cfg) == []


def test_validate_command_exit_codes(tmp_path, capsys):
    good = write(tmp_path, "good.json", BOOSTED8)
    assert main(["validate", "--config", str(good)]) == 0
    bad = write(tmp_path, "bad.json", {**BOOSTED8, "state": {"kind": "gibbs", "beta": -2}})
    assert main(["validate", "--config", str(bad)]) == 1
    assert "state.beta must be ≥ 0" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "missing.json")]) == 1


def test_dimension_cap_fails_fast(tmp_path, monkeypatch):
    huge = write(tmp_path, "huge.json", {**BOOSTED8, "lattice": {"sides": [48]}})
    start = time.perf_counter()
    assert main(["run", "--config", str(huge), "--out", str(tmp_path / "never")]) == 1
    assert time.perf_counter() - start < 1.0
    assert not (tmp_path / "never").exists()
    monkeypatch.setenv("SLOWDECAY_DIM_CAP", "128")
    assert any("DimensionOverflow" in v for v in validate_config(BOOSTED8))


def test_zero_current_run(tmp_path):
    result = run_experiment(ExperimentConfig.from_dict(ZERO8), tmp_path)
    m = result.manifest
    assert result.exit_code == 0
    assert m["measurements"]["current"] == 0.0 or abs(m["measurements"]["current"]) < 1e-12
    assert result.assertion("sum_rule")["passed"] and result.assertion("sum_rule_t0")["passed"]
    assert result.assertion("decay_bound")["passed"]
    for name, digest in m["artifacts"].items():
        assert sha256(tmp_path / name) == digest
    assert set(m["artifacts"]) == {"grid.csv", "decay_report.json", "decay.svg"}


def test_boosted_run_passes_and_reports_are_recomputable(boosted_run):
    m = boosted_run.manifest
    assert boosted_run.passed, [a for a in m["assertions"] if a["passed"] is False]
    meas = m["measurements"]
    assert abs(meas["current"]) > 1e-3
    S, W, report = reports_from_grid(boosted_run.out_dir / "grid.csv", meas["current"], meas["V_lr"], n_chart=8)
    assert report.margin.min() == meas["min_margin"]
    assert np.abs(S - meas["current"]).max() == meas["max_sum_rule_drift"]
    stored = json.loads((boosted_run.out_dir / "decay_report.json").read_text())
    assert stored["report"]["W"] == W.tolist()
    assert len(stored["wraparound"]["drift"]) == 2


def test_rerun_reproduces_the_csv(tmp_path, boosted_run):
    again = run_experiment(ExperimentConfig.from_dict(BOOSTED8), tmp_path)
    assert (tmp_path / "grid.csv").read_bytes() == (boosted_run.out_dir / "grid.csv").read_bytes()
    assert again.manifest["artifacts"]["decay.svg"] == boosted_run.manifest["artifacts"]["decay.svg"]


def test_failed_assertion_exits_with_two_and_still_writes_artifacts(tmp_path):
    cfg = copy.deepcopy(BOOSTED8)
    cfg["tolerances"] = {"sum_rule_tol": 1e-15}
    path = write(tmp_path, "strict.json", cfg)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out"), "--workers", "3"]) == 2
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["passed"] is False
    failed = [a["name"] for a in manifest["assertions"] if a["passed"] is False]
    assert failed == ["sum_rule"]
    assert manifest["invocation"]["workers"] == 3
    assert (tmp_path / "out" / "grid.csv").exists()


def test_partial_stages(tmp_path):
    cfg = ExperimentConfig.from_dict(BOOSTED8)
    s = run_experiment(cfg, tmp_path / "s", stage="sumrule")
    assert s.passed and set(s.manifest["artifacts"]) == {"grid.csv", "sum_rule.json"}
    assert s.manifest["measurements"]["v_source"] == "default"
    f = run_experiment(cfg, tmp_path / "f", stage="lrfit")
    assert f.passed and set(f.manifest["artifacts"]) == {"lr_fit.json"}
    assert f.manifest["measurements"]["V_lr"] > 0


def test_sweep_over_boosts_with_duplicate_point(tmp_path):
    sweep = {"base": BOOSTED8, "axes": {"boost_k": [0, 1, 2, 1]}}
    rows, code = run_sweep(sweep, tmp_path, workers=2)
    assert code == 0
    assert [r["point"] for r in rows] == [0, 1, 2, 3]
    assert abs(rows[0]["current"]) < 1e-12
    assert abs(rows[1]["current"]) > 1e-3
    for key in ("current", "max_sum_rule_drift", "min_margin", "V_lr"):
        assert abs(rows[1][key] - rows[3][key]) <= 1e-12
    with open(tmp_path / "sweep_summary.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert [row["boost_k"] for row in table] == ["0", "1", "2", "1"]
    assert all((tmp_path / f"point_{i:03d}" / "manifest.json").exists() for i in range(4))


def test_sweep_marks_failed_points_and_continues(tmp_path):
    cfg = copy.deepcopy(BOOSTED8)
    cfg["tolerances"] = {"sum_rule_tol": 1e-15}
    rows, code = run_sweep({"base": cfg, "axes": {"boost_k": [0, 1]}}, tmp_path)
    assert code == 2
    assert [r["status"] for r in rows] == ["ok", "failed"]


def test_sweep_guards():
    with pytest.raises(ConfigError):
        run_sweep({"base": BOOSTED8, "axes": {"colour": [1]}})
    with pytest.raises(ConfigError):
        run_sweep({"base": BOOSTED8, "axes": {"boost_k": list(range(100))}})
    with pytest.raises(ConfigError):
        run_sweep({"base": BOOSTED8, "axes": {"beta": [-1.0]}})


@pytest.mark.slow
def test_sum_rule_drift_decreases_with_ring_length(tmp_path):
    rows, code = run_sweep({"base": BOOSTED8 | {"grid": {"with_norms": False, "wraparound_count": 0}},
                            "axes": {"L": [8, 10, 12]}}, tmp_path, workers=3)
    assert code == 0
    drift = [r["max_sum_rule_drift"] for r in rows]
    assert all(b <= a + 1e-9 for a, b in zip(drift, drift[1:])), drift


def test_module_entry_point(tmp_path):
    path = write(tmp_path, "c.json", BOOSTED8)
    done = subprocess.run([sys.executable, "-m", "slowdecay", "validate", "--config", str(path)],
                          capture_output=True, text=True)
    assert done.returncode == 0
    assert json.loads(done.stdout)["lattice"]["sides"] == [8]


def test_resolved_config_round_trips():
    cfg = ExperimentConfig.from_dict(BOOSTED8)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
