import csv
import json
import time
from pathlib import Path

import pytest

from enrichest.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(args):
    return main([str(a) for a in args])


class TestEstimate:
    def test_walkthrough_golden(self, capsys, tmp_path):
        out = tmp_path / "report.csv"
        start = time.perf_counter()
        rc = run(
            [
                "estimate",
                "--config", CONFIGS / "worked_example.json",
                "--data", CONFIGS / "worked_example_data.json",
                "--targets", "F,1,2",
                "--out", out,
            ]
        )
        elapsed = time.perf_counter() - start
        assert rc == 0
        assert elapsed < 1.0
        rows = {r["target"]: r for r in csv.DictReader(out.open())}
        assert float(rows["F"]["mle"]) == pytest.approx(0.057, abs=5e-4)
        assert float(rows["1"]["mle"]) == pytest.approx(0.127, abs=5e-4)
        assert float(rows["2"]["mle"]) == pytest.approx(-0.013, abs=5e-4)
        assert float(rows["F"]["umvcue"]) == pytest.approx(0.042, abs=5e-4)
        assert float(rows["1"]["umvcue"]) == pytest.approx(0.124, abs=5e-4)
        assert float(rows["2"]["umvcue"]) == pytest.approx(-0.031, abs=5e-4)
        printed = capsys.readouterr().out
        assert "selection: F" in printed

    def test_default_targets_cover_selection_and_members(self, capsys):
        rc = run(
            [
                "estimate",
                "--config", CONFIGS / "worked_example.json",
                "--data", CONFIGS / "worked_example_data.json",
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        assert printed.count("\n") >= 5  # header + selection + three targets

    def test_unconditional_equals_mle(self, tmp_path):
        out = tmp_path / "report.csv"
        rc = run(
            [
                "estimate",
                "--config", CONFIGS / "worked_example.json",
                "--data", CONFIGS / "worked_example_data.json",
                "--targets", "F,1,2",
                "--unconditional",
                "--out", out,
            ]
        )
        assert rc == 0
        for row in csv.DictReader(out.open()):
            assert float(row["umvcue"]) == float(row["mle"])

    def test_malformed_config_names_offending_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        cfg = json.loads((CONFIGS / "worked_example.json").read_text())
        cfg["design"]["n3"] = 50
        bad.write_text(json.dumps(cfg))
        rc = run(["estimate", "--config", bad, "--data", CONFIGS / "worked_example_data.json"])
        assert rc == 1
        assert "'n3'" in capsys.readouterr().err

    def test_invalid_json_is_config_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = run(["estimate", "--config", bad, "--data", CONFIGS / "worked_example_data.json"])
        assert rc == 1

    def test_futility_exit_code(self, tmp_path, capsys):
        cfg = json.loads((CONFIGS / "worked_example.json").read_text())
        cfg["design"]["delta_star"] = 5.0  # nothing clears this
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        data = {
            "cells": [
                {"subpopulation": m, "stage": 1, "arm": a, "count": 50, "mean": 0.1 * a}
                for m in (1, 2)
                for a in (0, 1)
            ]
        }
        data_path = tmp_path / "stage1.json"
        data_path.write_text(json.dumps(data))
        rc = run(["estimate", "--config", cfg_path, "--data", data_path])
        assert rc == 2
        assert "futility" in capsys.readouterr().out.lower()

    def test_inconsistent_data_and_rule(self, tmp_path, capsys):
        # stage-2 data present although the rule stops
        cfg = json.loads((CONFIGS / "worked_example.json").read_text())
        cfg["design"]["delta_star"] = 5.0
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        rc = run(["estimate", "--config", cfg_path, "--data", CONFIGS / "worked_example_data.json"])
        assert rc == 1
        assert "disagree" in capsys.readouterr().err

    def test_bad_target_exit_code(self, tmp_path, capsys):
        # enrichment data: rule picks subpopulation 1, target 2 is not estimable
        cfg = json.loads((CONFIGS / "worked_example.json").read_text())
        cfg["design"]["delta_star"] = 0.05
        cfg["design"]["n1"] = 200
        cfg["design"]["n2"] = 100
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        data = {
            "cells": [
                {"subpopulation": 1, "stage": 1, "arm": 1, "count": 50, "mean": 0.113},
                {"subpopulation": 1, "stage": 1, "arm": 0, "count": 50, "mean": 0.0},
                {"subpopulation": 2, "stage": 1, "arm": 1, "count": 50, "mean": -0.1},
                {"subpopulation": 2, "stage": 1, "arm": 0, "count": 50, "mean": 0.0},
                {"subpopulation": 1, "stage": 2, "arm": 1, "count": 50, "mean": 0.15},
                {"subpopulation": 1, "stage": 2, "arm": 0, "count": 50, "mean": 0.0},
            ]
        }
        data_path = tmp_path / "enriched.json"
        data_path.write_text(json.dumps(data))
        rc = run(["estimate", "--config", cfg_path, "--data", data_path, "--targets", "1,2"])
        assert rc == 3
        assert "error" in capsys.readouterr().out

    def test_io_failure_exit_code(self, capsys):
        rc = run(
            [
                "estimate",
                "--config", CONFIGS / "worked_example.json",
                "--data", CONFIGS / "worked_example_data.json",
                "--out", "/nonexistent-dir/report.csv",
            ]
        )
        assert rc == 4

    def test_missing_file_is_config_error(self, capsys):
        rc = run(["estimate", "--config", "/no/such.json", "--data", "/no/data.json"])
        assert rc == 1


class TestSimulate:
    def test_deterministic_csv(self, tmp_path, capsys):
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        base = [
            "simulate",
            "--config", CONFIGS / "simulation_study.json",
            "--reps", "400",
            "--seed", "99",
        ]
        assert run(base + ["--out", out1]) == 0
        assert run(base + ["--out", out2, "--threads", "2"]) == 0
        assert out1.read_bytes() == out2.read_bytes()
        assert "Selection proportion" in capsys.readouterr().out

    def test_markdown_output(self, tmp_path):
        md = tmp_path / "table.md"
        rc = run(
            [
                "simulate",
                "--config", CONFIGS / "ordered_rule_study.json",
                "--reps", "300",
                "--seed", "7",
                "--out", tmp_path / "r.csv",
                "--markdown", md,
            ]
        )
        assert rc == 0
        assert "| Method |" in md.read_text()

    def test_single_rep(self, tmp_path):
        rc = run(
            [
                "simulate",
                "--config", CONFIGS / "winner_rule_study.json",
                "--reps", "1",
                "--seed", "3",
                "--out", tmp_path / "one.csv",
            ]
        )
        assert rc == 0
        rows = list(csv.DictReader((tmp_path / "one.csv").open()))
        assert sum(int(r["n_cell"]) for r in rows if r["estimator"] in ("", "mle")) == 1

    def test_io_failure(self, capsys):
        rc = run(
            [
                "simulate",
                "--config", CONFIGS / "simulation_study.json",
                "--reps", "10",
                "--out", "/nonexistent-dir/r.csv",
            ]
        )
        assert rc == 4

    def test_no_scenarios_is_config_error(self, capsys):
        rc = run(["simulate", "--config", CONFIGS / "worked_example.json", "--reps", "10"])
        assert rc == 1

    def test_bad_reps(self, capsys):
        rc = run(["simulate", "--config", CONFIGS / "simulation_study.json", "--reps", "0"])
        assert rc == 1


class TestVerify:
    def test_fast_level_passes(self, tmp_path, capsys):
        report = tmp_path / "verify.json"
        rc = run(["verify", "--level", "fast", "--seed", "11", "--json", report])
        assert rc == 0
        payload = json.loads(report.read_text())
        assert payload["passed"] is True
        names = {c["name"] for c in payload["checks"]}
        assert "kernel-reference" in names and "oracle-equivalence-100" in names
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out


class TestUsage:
    def test_unknown_flag_maps_to_config_exit(self, capsys):
        assert run(["estimate", "--nope"]) == 1

    def test_missing_subcommand(self, capsys):
        assert run([]) == 1
