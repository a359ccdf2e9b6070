import csv
import hashlib
import json
import statistics

import numpy as np
import pytest
import yaml

from collabrl.cli import EXIT_CONFIG, EXIT_OK, EXIT_PHASE, EXIT_SCHEMA, OUT_ENV, main
from collabrl.reports import csv_columns, write_csv

TINY = {"num_users": 20, "num_states": 3, "num_actions": 2, "horizon": 2, "rank": 1}


def config(tmp_path, name="cfg.yaml", **doc):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_is_byte_identical(tmp_path, capsys):
    cfg = config(tmp_path, mode="tabular", instance=TINY)
    for out in ("a", "b"):
        assert main(["gen", "--config", cfg, "--seed", "3", "--out", str(tmp_path / out)]) == EXIT_OK
    a = (tmp_path / "a" / "instance-tabular-seed3.json").read_bytes()
    b = (tmp_path / "b" / "instance-tabular-seed3.json").read_bytes()
    assert a == b
    printed = capsys.readouterr().out.split()
    assert f"sha256={hashlib.sha256(a).hexdigest()}" in printed


def test_rank_violation_is_a_config_error(tmp_path, capsys):
    cfg = config(tmp_path, mode="tabular", instance={**TINY, "num_users": 4, "rank": 3})
    assert main(["gen", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "rank" in capsys.readouterr().err


def test_unknown_config_field(tmp_path):
    cfg = config(tmp_path, mode="tabular", instance={**TINY, "colour": 1})
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bundle_run_matches_generated_run(tmp_path):
    doc = dict(mode="tabular", instance=TINY, pipeline={"mask_rate": 0.5}, record_timing=False)
    cfg = config(tmp_path, **doc)
    gen_dir, a_dir, b_dir = tmp_path / "gen", tmp_path / "a", tmp_path / "b"
    assert main(["gen", "--config", cfg, "--seed", "0", "--out", str(gen_dir)]) == EXIT_OK
    assert main(["run", "--config", cfg, "--seed", "0", "--out", str(a_dir)]) == EXIT_OK
    bundle = str(gen_dir / "instance-tabular-seed0.json")
    assert main(["run", "--config", cfg, "--seed", "0", "--bundle", bundle, "--out", str(b_dir)]) == EXIT_OK
    assert (a_dir / "run-tabular-seed0.csv").read_text() == (b_dir / "run-tabular-seed0.csv").read_text()
    assert (a_dir / "run-tabular-seed0.json").read_text() == (b_dir / "run-tabular-seed0.json").read_text()


def test_bundle_kind_must_match_mode(tmp_path):
    cfg = config(tmp_path, mode="tabular", instance=TINY)
    assert main(["gen", "--config", cfg, "--seed", "0", "--out", str(tmp_path)]) == EXIT_OK
    bundle = str(tmp_path / "instance-tabular-seed0.json")
    assert main(["run", "--mode", "linear", "--bundle", bundle, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_run_totals_are_conserved(tmp_path):
    cfg = config(tmp_path, mode="tabular", instance=TINY, pipeline={"mask_rate": 0.5}, record_timing=False)
    assert main(["run", "--config", cfg, "--seed", "0", "--out", str(tmp_path)]) == EXIT_OK
    rows = rows_of(tmp_path / "run-tabular-seed0.csv")
    phases = [r for r in rows if r["phase"] != "total"]
    total = next(r for r in rows if r["phase"] == "total")
    assert [r["phase"] for r in phases] == ["phase1", "phase2"]  # only phases that draw trajectories
    assert int(total["trajectories"]) == sum(int(r["trajectories"]) for r in phases)
    doc = json.loads((tmp_path / "run-tabular-seed0.json").read_text())
    assert doc["status"] == "ok"
    assert float(total["max_user_subopt"]) <= 0.05


def test_phase_failure_keeps_partial_report(tmp_path):
    # seed 2 at p=0.4 leaves a column without a completion certificate
    cfg = config(tmp_path, mode="tabular", instance=TINY, pipeline={"mask_rate": 0.4}, record_timing=False)
    assert main(["run", "--config", cfg, "--seed", "2", "--out", str(tmp_path)]) == EXIT_PHASE
    doc = json.loads((tmp_path / "run-tabular-seed2.json").read_text())
    assert doc["status"] == "failed:phase3"
    assert "phase3" in doc["extra"]["failure"]
    assert doc["phase_trajectories"]["phase2"] > 0


def test_linear_run(tmp_path):
    inst = {"num_users": 60, "dim": 8, "horizon": 2, "rank": 2, "num_states": 16, "num_actions": 4}
    cfg = config(tmp_path, mode="linear", instance=inst, record_timing=False)
    assert main(["run", "--config", cfg, "--seed", "0", "--out", str(tmp_path)]) == EXIT_OK
    rows = rows_of(tmp_path / "run-linear-seed0.csv")
    total = next(r for r in rows if r["phase"] == "total")
    assert float(total["max_user_subopt"]) <= 0.05
    assert float(total["recovery_residual_h1"]) <= 1e-6


def test_baseline_reaches_epsilon_for_every_user(tmp_path):
    cfg = config(tmp_path, mode="baseline", instance=TINY, baseline={"epsilon": 0.05}, record_timing=False)
    assert main(["baseline", "--config", cfg, "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "run-baseline-seed1.json").read_text())
    assert max(doc["user_subopt"]) <= 0.05
    assert sum(doc["extra"]["per_user_trajectories"]) == sum(doc["phase_trajectories"].values())


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env-out"))
    cfg = config(tmp_path, mode="tabular", instance=TINY)
    assert main(["gen", "--config", cfg, "--seed", "0"]) == EXIT_OK
    assert (tmp_path / "env-out" / "instance-tabular-seed0.json").exists()


def fake_run_csv(path, seed, trajectories):
    header = csv_columns(1)
    rows = [[seed, "phase2", trajectories, 0.01, 0.005, 1e-9, 3.0],
            [seed, "total", trajectories + 10, 0.01, 0.005, 1e-9, 4.0]]
    path.write_text(write_csv(None, header, rows))
    return str(path)


def test_report_of_a_single_run_is_that_run(tmp_path):
    f = fake_run_csv(tmp_path / "r0.csv", 0, 123)
    assert main(["report", f, "--out", str(tmp_path / "rep")]) == EXIT_OK
    agg = rows_of(tmp_path / "rep" / "aggregate.csv")
    row = next(r for r in agg if r["phase"] == "phase2" and r["column"] == "trajectories")
    assert row["runs"] == "1"
    assert all(float(row[k]) == 123 for k in ("median", "q10", "q90", "min", "max"))


def test_report_median_over_twenty_runs(tmp_path):
    counts = np.random.default_rng(0).integers(100, 10_000, size=20).tolist()
    files = [fake_run_csv(tmp_path / f"r{s}.csv", s, c) for s, c in enumerate(counts)]
    assert main(["report", *files, "--out", str(tmp_path / "rep")]) == EXIT_OK
    agg = rows_of(tmp_path / "rep" / "aggregate.csv")
    row = next(r for r in agg if r["phase"] == "phase2" and r["column"] == "trajectories")
    ordered = sorted(counts)
    assert float(row["median"]) == (ordered[9] + ordered[10]) / 2 == statistics.median(counts)
    assert float(row["min"]) == ordered[0] and float(row["max"]) == ordered[-1]
    assert float(row["q10"]) <= float(row["median"]) <= float(row["q90"])
    plot = (tmp_path / "rep" / "plot.dat").read_text().splitlines()
    assert len(plot) == 21 and plot[1] == f"0 {counts[0] + 10}"


def test_report_rejects_bad_inputs(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_SCHEMA
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["report", str(empty), "--out", str(tmp_path)]) == EXIT_SCHEMA
    a = fake_run_csv(tmp_path / "a.csv", 0, 5)
    other = tmp_path / "b.csv"
    other.write_text(write_csv(None, csv_columns(2), [[1, "total", 5, 0, 0, 0, 0, 0]]))
    assert main(["report", a, str(other), "--out", str(tmp_path)]) == EXIT_SCHEMA


def test_completion_curve_command(tmp_path, capsys):
    cfg = config(tmp_path, pipeline={"n1": 12, "n2": 12, "rank": 1, "rates": [0.1, 0.6], "seeds": 4})
    assert main(["completion-curve", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rows = rows_of(tmp_path / "completion-curve-12x12-r1.csv")
    assert [r["rate"] for r in rows] and int(rows[1]["successes"]) >= int(rows[0]["successes"])
    assert int(rows[1]["trials"]) == 4
    assert "success_rate" in capsys.readouterr().out


def test_rowwise_command(tmp_path, capsys):
    cfg = config(tmp_path, instance={"num_rows": 30, "dim": 8, "rank": 2})
    assert main(["rowwise", "--config", cfg, "--seed", "1", "--out", str(tmp_path)]) == EXIT_OK
    rows = rows_of(tmp_path / "rowwise-seed1.csv")
    assert int(rows[-1]["rejected"]) == 0
    assert "max_error=" in capsys.readouterr().out


def test_rowwise_unknown_sampler(tmp_path):
    cfg = config(tmp_path, pipeline={"sampler": "gaussian"})
    assert main(["rowwise", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
