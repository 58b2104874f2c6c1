"""Simulation stage: paced potentials and noisy recordings for held-out operators."""

import math
from typing import Dict, List

from ..cardiac import (
    HeartPotential,
    PacingSite,
    add_noise,
    forward_project,
    pick_pacing_sites,
    save_potential,
    save_recording,
    simulate_ap,
)
from ..errors import EmptyDatasetError
from ..forge import OperatorPair, load_dataset
from .base import PipelineStage, StageMetadata, StageResult, registry, write_jsonl

_NOISE_STREAM = 5


def held_out_specs(pairs: List[OperatorPair], count: int) -> List[OperatorPair]:
    """First ``count`` test pairs with distinct target operators."""
    seen, chosen = set(), []
    for pair in pairs:
        if pair.h_f.id not in seen:
            seen.add(pair.h_f.id)
            chosen.append(pair)
        if len(chosen) == count:
            break
    return chosen


@registry.register("simulate")
class SimulateStage(PipelineStage):
    def get_metadata(self) -> StageMetadata:
        return StageMetadata(
            name="simulate",
            description="Simulate paced heart potentials and noisy body recordings",
            requires=["dataset/manifest.jsonl"],
            produces=["cases/cases.jsonl", "cases/site_*.imo", "cases/*/y.imo"],
        )

    def run(self) -> StageResult:
        cfg, layout = self.cfg, self.layout
        layout.require(layout.dataset_dir / "manifest.jsonl", "forge")
        manifest = load_dataset(layout.dataset_dir, seed=cfg.seed)
        mesh = self.source_mesh()
        sites = pick_pacing_sites(mesh, cfg.n_pacing_sites, cfg.seed)
        specs = held_out_specs(manifest.test_pairs(), math.ceil(cfg.n_cases / len(sites)))
        if not specs:
            raise EmptyDatasetError("no held-out operators to simulate")
        cases = [(pair, site) for pair in specs for site in sites][: cfg.n_cases]

        params = cfg.ap_params()
        potentials: Dict[int, HeartPotential] = dict(
            zip(
                [site.node for site in sites],
                self.compute.map(lambda site: simulate_ap(mesh, site, params), sites),
            )
        )
        for site in sites:
            save_potential(layout.cases_dir / f"site_{site.node}.imo", potentials[site.node], site)

        def record(index: int) -> dict:
            pair, site = cases[index]
            case_id = f"case{index:03d}"
            clean = forward_project(pair.h_f, potentials[site.node])
            y = add_noise(clean, cfg.snr_db, seed=[cfg.seed, _NOISE_STREAM, index])
            save_recording(layout.cases_dir / case_id / "y.imo", y)
            return {
                "case_id": case_id,
                "pair_id": pair.pair_id,
                "label": pair.label.value,
                "pacing_node": site.node,
                "onset_ms": site.onset_ms,
                "h_i_path": f"dataset/operators/{pair.h_i.id}.imo",
                "h_f_path": f"dataset/operators/{pair.h_f.id}.imo",
                "u_true_path": f"cases/site_{site.node}.imo",
                "y_path": f"cases/{case_id}/y.imo",
            }

        records = self.compute.map(record, list(range(len(cases))))
        write_jsonl(layout.cases_manifest, records)
        self.logger.info("cases_simulated", cases=len(records), sites=[s.node for s in sites])
        return StageResult(
            stage="simulate",
            outputs={"cases": str(layout.cases_manifest)},
            summary={"cases": len(records), "pacing_nodes": [s.node for s in sites]},
        )


def case_site(record: dict) -> PacingSite:
    return PacingSite(int(record["pacing_node"]), float(record["onset_ms"]))
