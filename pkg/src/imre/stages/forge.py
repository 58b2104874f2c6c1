"""Forge stage: sample labeled erroneous operators and write the paired dataset."""

from ..forge import forge_dataset, save_dataset
from .base import PipelineStage, StageMetadata, StageResult, registry


@registry.register("forge")
class ForgeStage(PipelineStage):
    def get_metadata(self) -> StageMetadata:
        return StageMetadata(
            name="forge",
            description="Forge labeled operator pairs with an 80-20 split",
            produces=["dataset/manifest.jsonl", "dataset/operators/*.imo"],
        )

    def run(self) -> StageResult:
        cfg = self.cfg
        manifest = forge_dataset(
            count=cfg.dataset_count,
            classes=cfg.error_classes(),
            seed=cfg.seed,
            n_source=cfg.n_source,
            n_sensor=cfg.n_sensor,
            pairing=cfg.pairing,
            compute=self.compute,
        )
        manifest_path = save_dataset(manifest, self.layout.dataset_dir)
        return StageResult(
            stage="forge",
            outputs={"manifest": str(manifest_path)},
            summary={
                "pairs": len(manifest.pairs),
                "train": len(manifest.train_pairs()),
                "test": len(manifest.test_pairs()),
            },
        )
