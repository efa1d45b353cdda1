"""Command-line surface: outputs, manifests, determinism, exit codes."""

import json
import os
import subprocess
import sys

import click
import pytest
from click.testing import CliRunner

from ventxfer.cli import _parse_only, cli, run_gradcheck
from ventxfer.config import ExperimentConfig
from ventxfer.transferlab import write_rows_jsonl


def run_cli(args, **kwargs):
    return CliRunner().invoke(cli, args, catch_exceptions=True, **kwargs)


def run_proc(args):
    return subprocess.run([sys.executable, "-m", "ventxfer.cli", *args],
                          capture_output=True, text=True)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    res = run_cli(["synth", "--institution", "source", "--n", "40",
                   "--seed", "11", "--out", str(out)])
    assert res.exit_code == 0, res.output
    return out


class TestSynth:
    def test_writes_cohort_files_and_manifest(self, synth_dir):
        for name in ("source_events.csv", "source_statics.csv",
                     "source_outcomes.csv", "source_oracle.json",
                     "manifest_synth.json"):
            assert (synth_dir / name).exists()

    def test_echoes_calibration_summary(self, tmp_path):
        res = run_cli(["synth", "--institution", "target", "--n", "25",
                       "--seed", "2", "--out", str(tmp_path)])
        assert res.exit_code == 0
        assert "duration median" in res.output
        assert "reintubation prevalence" in res.output

    def test_rerun_is_byte_identical(self, synth_dir, tmp_path):
        res = run_cli(["synth", "--institution", "source", "--n", "40",
                       "--seed", "11", "--out", str(tmp_path)])
        assert res.exit_code == 0
        for name in ("source_events.csv", "source_oracle.json"):
            assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()

    def test_manifest_lists_outputs(self, synth_dir):
        doc = json.loads((synth_dir / "manifest_synth.json").read_text())
        assert doc["command"] == "synth"
        assert "source_events.csv" in doc["outputs"]


class TestPreprocess:
    def args(self, synth_dir, out):
        return [
            "preprocess",
            "--events", str(synth_dir / "source_events.csv"),
            "--statics", str(synth_dir / "source_statics.csv"),
            "--outcomes", str(synth_dir / "source_outcomes.csv"),
            "--out", str(out), "--knn-k", "3",
        ]

    def test_store_written_with_zero_missing(self, synth_dir, tmp_path):
        out = tmp_path / "store.npz"
        res = run_cli(self.args(synth_dir, out))
        assert res.exit_code == 0, res.output
        assert "zero missing cells" in res.output
        assert out.exists()

    def test_unknown_feature_is_a_data_error(self, synth_dir, tmp_path):
        bad = tmp_path / "events.csv"
        text = (synth_dir / "source_events.csv").read_text()
        bad.write_text(text.replace("heart_rate", "pulse_rate"))
        res = run_cli([
            "preprocess", "--events", str(bad),
            "--statics", str(synth_dir / "source_statics.csv"),
            "--outcomes", str(synth_dir / "source_outcomes.csv"),
            "--out", str(tmp_path / "s.npz"),
        ])
        assert res.exit_code != 0
        assert "pulse_rate" in str(res.exception)


class TestReport:
    def test_renders_from_rows(self, tmp_path):
        cfg = ExperimentConfig()
        rows = []
        for task in (1, 2):
            for seed in cfg.seeds:
                rows.append({"task": task, "regime": "target-only",
                             "fraction": 1.0, "seed": seed, "auroc": 0.8,
                             "auprc": 0.4, "bacc": 0.7, "n_test": 30,
                             "runtime_s": 1.0})
        grid_dir = tmp_path / "grid"
        grid_dir.mkdir()
        write_rows_jsonl(grid_dir / "rows.jsonl", rows)
        res = run_cli(["report", "--grid-dir", str(grid_dir)])
        assert res.exit_code == 0, res.output
        assert "Target-Only" in res.output
        report_dir = grid_dir / "report"
        assert (report_dir / "report.csv").exists()
        assert (report_dir / "auroc_vs_fraction_task1.png").exists()


class TestGradcheck:
    def test_all_cases_pass_default_tolerance(self):
        results, worst = run_gradcheck()
        assert worst < 1e-4
        names = [n for n, _ in results]
        assert "guided-infonce" in names
        assert len(names) == 17

    def test_cli_output(self):
        res = run_cli(["gradcheck"])
        assert res.exit_code == 0, res.output
        assert "all 17 checks passed" in res.output


class TestOnlyFilter:
    def test_parses_and_filters(self):
        keep = _parse_only("task=1,regime=cpc-ftf,fraction=0.05")
        assert keep((1, "cpc-ftf", 0.05, 3))
        assert not keep((2, "cpc-ftf", 0.05, 3))
        assert not keep((1, "target-only", 0.05, 3))

    def test_bad_clause_is_usage_error(self):
        with pytest.raises(click.UsageError):
            _parse_only("task:1")
        with pytest.raises(click.UsageError):
            _parse_only("model=gru")


class TestExitCodes:
    def test_usage_error_is_1(self, tmp_path):
        p = run_proc(["synth", "--n", "0", "--out", str(tmp_path)])
        assert p.returncode == 1

    def test_data_error_is_2(self, tmp_path):
        p = run_proc(["report", "--grid-dir", str(tmp_path)])
        assert p.returncode == 2
        assert "rows.jsonl" in p.stderr

    def test_numeric_error_is_3(self):
        p = run_proc(["gradcheck", "--tolerance", "1e-12"])
        assert p.returncode == 3

    def test_success_is_0(self, tmp_path):
        p = run_proc(["synth", "--institution", "source", "--n", "3",
                      "--seed", "1", "--out", str(tmp_path)])
        assert p.returncode == 0
