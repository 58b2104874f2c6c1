"""
End-to-End Pipeline Tests
=========================

Runs the CLI over a tiny configuration so every stage executes in seconds.
"""

import json
from pathlib import Path

import pandas as pd
import pytest
from typer.testing import CliRunner

from imre.cli import EXIT_BUDGET_CAPPED, EXIT_FAILURE, EXIT_OK, app
from imre.config import STAGE_NAMES, ExperimentConfig
from imre.pipeline import run_pipeline
from imre.stages import RunLayout, registry

TINY = """
N_SOURCE=24
N_SENSOR=16
DATASET_COUNT=12
GEN_EPOCHS=2
GEN_BATCH_SIZE=8
GEN_LATENT_DIM=2
GEN_HIDDEN_WIDTHS=[8]
SOM_WIDTH=2
SOM_HEIGHT=2
SOM_EPOCHS=3
SOM_RADIUS_INITIAL=1.0
AP_STEPS=200
N_PACING_SITES=2
N_CASES=2
DFO_BUDGET=5
MAX_OUTER=2
MAX_WORKERS=1
"""

runner = CliRunner()


def tiny_config(directory: Path, extra: str = "") -> str:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "tiny.env"
    path.write_text(TINY + f"LOG_FILE={directory / 'imre.log'}\n" + extra, encoding="utf-8")
    return str(path)


def run_all(config: str, out: Path, seed: int = 4):
    return runner.invoke(app, ["run-all", "--config", config, "--seed", str(seed),
                               "--out", str(out)])


def expected_exit(out: Path) -> int:
    results = [json.loads(line) for line in (out / "inverse" / "results.jsonl").read_text().splitlines()]
    return EXIT_BUDGET_CAPPED if any(not r["converged"] for r in results) else EXIT_OK


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny")
    config = tiny_config(base)
    out = base / "run"
    result = run_all(config, out)
    return config, out, result


class TestRegistry:
    def test_every_stage_registered(self):
        assert sorted(registry.names()) == sorted(STAGE_NAMES)

    def test_unknown_stage(self):
        with pytest.raises(KeyError):
            registry.get("deploy")


class TestRunAll:
    def test_exit_code_reflects_convergence(self, tiny_run):
        _, out, result = tiny_run
        assert result.exit_code == expected_exit(out), result.output

    def test_artifacts_written(self, tiny_run):
        _, out, _ = tiny_run
        layout = RunLayout(out)
        for path in (
            layout.dataset_dir / "manifest.jsonl",
            layout.generator_path,
            layout.som_path,
            layout.cases_manifest,
            layout.inverse_manifest,
            layout.report("training_log.csv"),
            layout.report("som_clusters.csv"),
            layout.report("generator_eval.csv"),
            layout.report("som_eval.csv"),
            layout.report("summary.csv"),
            layout.report("traces/case000.csv"),
            layout.inverse_dir / "case001" / "u_imre.imo",
        ):
            assert path.exists(), path

    def test_summary_columns(self, tiny_run):
        _, out, _ = tiny_run
        summary = pd.read_csv(out / "reports" / "summary.csv")
        assert len(summary) == 2
        for method in ("initial", "imre", "oracle"):
            for metric in ("rmse", "scc", "tcc"):
                assert f"{metric}_{method}" in summary.columns
            assert f"loc_{method}_mm" in summary.columns
        assert (summary["rmse_imre"] >= 0).all()

    def test_trace_starts_with_initial_solve(self, tiny_run):
        _, out, _ = tiny_run
        trace = pd.read_csv(out / "reports" / "traces" / "case000.csv")
        assert list(trace.columns) == ["outer_iter", "dfo_evals", "residual", "rel_du",
                                       "rel_dh", "rmse_u"]
        assert trace["outer_iter"].tolist()[0] == 0
        assert 2 <= len(trace) <= 3
        later = trace["residual"].tolist()[1:]
        assert all(b <= a + 1e-9 for a, b in zip(later, later[1:]))

    def test_training_log(self, tiny_run):
        _, out, _ = tiny_run
        log = pd.read_csv(out / "reports" / "training_log.csv")
        assert log["epoch"].tolist() == [1, 2]

    def test_rerun_is_identical(self, tiny_run, tmp_path):
        config, out, _ = tiny_run
        again = tmp_path / "again"
        run_all(config, again)
        assert (again / "reports" / "summary.csv").read_bytes() == (
            out / "reports" / "summary.csv"
        ).read_bytes()


class TestCliFailures:
    def test_all_stages_off(self, tmp_path):
        config = tiny_config(tmp_path, "STAGES=[]\n")
        result = run_all(config, tmp_path / "run")
        assert result.exit_code == EXIT_OK
        assert not (tmp_path / "run" / "reports").exists()

    def test_invalid_config(self, tmp_path):
        config = tiny_config(tmp_path, "SOM_SPEED=2\n")
        assert run_all(config, tmp_path / "run").exit_code == EXIT_FAILURE

    def test_missing_config(self, tmp_path):
        assert run_all(str(tmp_path / "absent.env"), tmp_path / "run").exit_code == EXIT_FAILURE

    def test_stage_without_inputs(self, tmp_path):
        config = tiny_config(tmp_path)
        result = runner.invoke(app, ["invert", "--config", config, "--out", str(tmp_path / "run")])
        assert result.exit_code == EXIT_FAILURE

    def test_single_stage(self, tmp_path):
        config = tiny_config(tmp_path)
        result = runner.invoke(app, ["forge", "--config", config, "--out", str(tmp_path / "run")])
        assert result.exit_code == EXIT_OK
        assert (tmp_path / "run" / "dataset" / "manifest.jsonl").exists()


class TestInit:
    def test_writes_loadable_config(self, tmp_path):
        path = tmp_path / "imre.env"
        result = runner.invoke(app, ["init", "--config-path", str(path)])
        assert result.exit_code == EXIT_OK
        assert path.exists()

    def test_refuses_overwrite(self, tmp_path):
        path = tmp_path / "imre.env"
        path.write_text("SEED=3\n")
        result = runner.invoke(app, ["init", "--config-path", str(path)])
        assert "already exists" in result.output
        assert path.read_text() == "SEED=3\n"


class TestRunPipeline:
    def test_no_stages(self, tmp_path):
        report = run_pipeline(ExperimentConfig(stages=[], out_dir=str(tmp_path)))
        assert report.results == [] and report.budget_capped == 0
