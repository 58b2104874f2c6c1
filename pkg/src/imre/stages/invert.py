"""Inversion stage: initial, corrected and oracle Tikhonov solutions per case."""

import math
from typing import Dict, List

import numpy as np
import pandas as pd

from ..cardiac import HeartPotential, load_potential, load_recording, save_potential
from ..forge import ForwardOperator, load_operator, save_operator
from ..generator import GeneratorModel
from ..inverse import (
    InverseProblem,
    OuterIteration,
    alternate_optimize,
    build_laplacian,
    detect_error_source,
    lcurve_lambda,
    tikhonov_solve,
)
from ..metrics import rmse
from ..som import load_som
from .base import PipelineStage, StageMetadata, StageResult, read_jsonl, registry, write_jsonl

TRACE_COLUMNS = ["outer_iter", "dfo_evals", "residual", "rel_du", "rel_dh", "rmse_u"]


@registry.register("invert")
class InvertStage(PipelineStage):
    def get_metadata(self) -> StageMetadata:
        return StageMetadata(
            name="invert",
            description="Alternate latent search and Tikhonov solves for every case",
            requires=["cases/cases.jsonl", "model/generator.imp", "model/atlas.ism"],
            produces=["inverse/results.jsonl", "inverse/*/*.imo", "reports/traces/*.csv"],
        )

    def run(self) -> StageResult:
        cfg, layout = self.cfg, self.layout
        cases = list(read_jsonl(layout.require(layout.cases_manifest, "simulate")))
        model = GeneratorModel.load(layout.require(layout.generator_path, "train-gen"))
        grid, lm = load_som(layout.require(layout.som_path, "train-som"))
        laplacian = build_laplacian(self.source_mesh())
        dfo_cfg, conv = cfg.dfo_config(), cfg.convergence()
        root = layout.root

        def invert(case: dict) -> Dict[str, object]:
            case_id = case["case_id"]
            y = load_recording(root / case["y_path"])
            h_i = load_operator(root / case["h_i_path"])
            h_true = load_operator(root / case["h_f_path"])
            u_true = load_potential(root / case["u_true_path"])
            lam = lcurve_lambda(h_i, y, laplacian) if cfg.inv_lcurve else cfg.inv_lambda

            u_initial = tikhonov_solve(h_i, y, lam, laplacian)
            u_oracle = tikhonov_solve(h_true, y, lam, laplacian)
            rows: List[dict] = [{
                "outer_iter": 0, "dfo_evals": 0,
                "residual": _residual(h_i, y.matrix, u_initial),
                "rel_du": math.nan, "rel_dh": math.nan,
                "rmse_u": rmse(u_initial, u_true),
            }]

            def track(it: OuterIteration, u: HeartPotential, _: ForwardOperator) -> None:
                rows.append({**it.model_dump(), "rmse_u": rmse(u, u_true)})

            problem = InverseProblem(y=y, h_i=h_i, model=model, lam=lam, laplacian=laplacian)
            result = alternate_optimize(problem, dfo_cfg, conv, on_iteration=track)
            predicted = detect_error_source(result.z, grid, lm)

            out = layout.inverse_dir / case_id
            save_potential(out / "u_initial.imo", u_initial)
            save_potential(out / "u_imre.imo", result.u)
            save_potential(out / "u_oracle.imo", u_oracle)
            save_operator(out / "h_corrected.imo", result.h_f)
            trace_path = layout.report(f"traces/{case_id}.csv")
            trace_path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(rows, columns=TRACE_COLUMNS).to_csv(
                trace_path, index=False, float_format="%.10g"
            )
            self.logger.info("case_inverted", case_id=case_id, converged=result.converged,
                             outer=len(result.trace), predicted=predicted.value,
                             label=case["label"])
            return {
                "case_id": case_id,
                "predicted_label": predicted.value,
                "converged": result.converged,
                "outer_iterations": len(result.trace),
                "dfo_evaluations": result.dfo_evaluations,
                "lambda": lam,
                "z": [float(v) for v in result.z.z],
                "u_initial_path": f"inverse/{case_id}/u_initial.imo",
                "u_imre_path": f"inverse/{case_id}/u_imre.imo",
                "u_oracle_path": f"inverse/{case_id}/u_oracle.imo",
            }

        results = self.compute.map(invert, cases)
        write_jsonl(layout.inverse_manifest, results)
        capped = sum(1 for r in results if not r["converged"])
        return StageResult(
            stage="invert",
            outputs={"results": str(layout.inverse_manifest),
                     "traces": str(layout.report("traces"))},
            summary={"cases": len(results), "converged": len(results) - capped},
            budget_capped=capped,
        )


def _residual(h: ForwardOperator, y: np.ndarray, u: HeartPotential) -> float:
    return float(np.linalg.norm(y - h.matrix @ u.matrix))
