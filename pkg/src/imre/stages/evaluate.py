"""Evaluation stage: per-case metrics plus generator and atlas diagnostics."""

from typing import Any, Dict, List

import numpy as np
import pandas as pd

from ..cardiac import load_potential
from ..forge import load_dataset
from ..generator import GeneratorModel, encode, generate_matrices
from ..metrics import evaluate_solution, rmse
from ..som import classify, load_som
from .base import PipelineStage, StageMetadata, StageResult, read_jsonl, registry
from .simulate import case_site

METHODS = ("initial", "imre", "oracle")


@registry.register("evaluate")
class EvaluateStage(PipelineStage):
    def get_metadata(self) -> StageMetadata:
        return StageMetadata(
            name="evaluate",
            description="Write summary, generator and atlas evaluation reports",
            requires=["inverse/results.jsonl", "model/generator.imp", "model/atlas.ism"],
            produces=["reports/summary.csv", "reports/generator_eval.csv",
                      "reports/som_eval.csv"],
        )

    def run(self) -> StageResult:
        layout = self.layout
        model = GeneratorModel.load(layout.require(layout.generator_path, "train-gen"))
        grid, lm = load_som(layout.require(layout.som_path, "train-som"))
        manifest = load_dataset(layout.require(layout.dataset_dir, "forge"), seed=self.cfg.seed)
        test_pairs = manifest.test_pairs()

        generator_rows: List[Dict[str, Any]] = []
        som_rows: List[Dict[str, Any]] = []
        if test_pairs:
            h_i = [p.h_i for p in test_pairs]
            h_f = [p.h_f for p in test_pairs]
            codes = np.atleast_2d(encode(model, h_i, h_f).mean)
            fitted = generate_matrices(model, h_i, codes)
            identity = generate_matrices(model, h_i, np.atleast_2d(encode(model, h_i, h_i).mean))
            for k, pair in enumerate(test_pairs):
                prior = rmse(pair.h_i, pair.h_f)
                generated = rmse(fitted[k], pair.h_f.matrix)
                generator_rows.append({
                    "pair_id": pair.pair_id,
                    "label": pair.label.value,
                    "rmse_prior": prior,
                    "rmse_generated": generated,
                    "rmse_identity": rmse(identity[k], pair.h_i.matrix),
                    "improved": generated < prior,
                })
                predicted = classify(grid, lm, codes[k])
                som_rows.append({
                    "pair_id": pair.pair_id,
                    "label": pair.label.value,
                    "predicted_label": predicted.value,
                    "correct": predicted == pair.label,
                })
        layout.reports_dir.mkdir(parents=True, exist_ok=True)
        generator_eval = pd.DataFrame(generator_rows)
        som_eval = pd.DataFrame(som_rows)
        generator_eval.to_csv(layout.report("generator_eval.csv"), index=False, float_format="%.10g")
        som_eval.to_csv(layout.report("som_eval.csv"), index=False)

        summary = self._summarize_cases()
        summary_path = layout.report("summary.csv")
        summary.to_csv(summary_path, index=False, float_format="%.10g")

        aggregate = aggregate_summary(summary)
        if not generator_eval.empty:
            aggregate["generator_improved_fraction"] = float(generator_eval["improved"].mean())
            aggregate["identity_to_prior_ratio"] = float(
                generator_eval["rmse_identity"].mean() / generator_eval["rmse_prior"].mean()
            )
            aggregate["som_accuracy"] = float(som_eval["correct"].mean())
        return StageResult(
            stage="evaluate",
            outputs={"summary": str(summary_path),
                     "generator_eval": str(layout.report("generator_eval.csv")),
                     "som_eval": str(layout.report("som_eval.csv"))},
            summary=aggregate,
        )

    def _summarize_cases(self) -> pd.DataFrame:
        layout, root = self.layout, self.layout.root
        cases = {c["case_id"]: c for c in read_jsonl(layout.require(layout.cases_manifest, "simulate"))}
        results = list(read_jsonl(layout.require(layout.inverse_manifest, "invert")))
        mesh = self.source_mesh()

        def row(result: Dict[str, Any]) -> Dict[str, Any]:
            case = cases[result["case_id"]]
            u_true = load_potential(root / case["u_true_path"])
            site = case_site(case)
            out: Dict[str, Any] = {
                "case_id": case["case_id"],
                "label": case["label"],
                "predicted_label": result["predicted_label"],
                "pacing_node": case["pacing_node"],
                "lambda": result["lambda"],
                "converged": result["converged"],
                "outer_iterations": result["outer_iterations"],
            }
            for method in METHODS:
                u = load_potential(root / result[f"u_{method}_path"])
                metrics = evaluate_solution(u, u_true, mesh, site)
                out[f"rmse_{method}"] = metrics.rmse
                out[f"scc_{method}"] = metrics.scc
                out[f"tcc_{method}"] = metrics.tcc
                out[f"loc_{method}_mm"] = metrics.loc_dist_mm
            return out

        return pd.DataFrame(self.compute.map(row, results))


def aggregate_summary(summary: pd.DataFrame) -> Dict[str, Any]:
    """Medians per method and the fraction of cases where correction helped."""
    if summary.empty:
        return {"cases": 0}
    aggregate: Dict[str, Any] = {"cases": int(len(summary))}
    for method in METHODS:
        aggregate[f"median_scc_{method}"] = float(summary[f"scc_{method}"].median())
        aggregate[f"median_tcc_{method}"] = float(summary[f"tcc_{method}"].median())
        aggregate[f"median_rmse_{method}"] = float(summary[f"rmse_{method}"].median())
    aggregate["rmse_improved_fraction"] = float(
        (summary["rmse_imre"] < summary["rmse_initial"]).mean()
    )
    aggregate["attribution_accuracy"] = float(
        (summary["predicted_label"] == summary["label"]).mean()
    )
    return aggregate
