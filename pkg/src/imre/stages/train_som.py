"""SOM training stage: map the training pairs' latent means onto the atlas."""

from ..forge import load_dataset
from ..generator import GeneratorModel, latent_codes
from ..som import save_clusters, save_som, train_som
from .base import PipelineStage, StageMetadata, StageResult, registry


@registry.register("train-som")
class TrainSomStage(PipelineStage):
    def get_metadata(self) -> StageMetadata:
        return StageMetadata(
            name="train-som",
            description="Train the SOM atlas on latent error codes and label its nodes",
            requires=["dataset/manifest.jsonl", "model/generator.imp"],
            produces=["model/atlas.ism", "reports/som_clusters.csv"],
        )

    def run(self) -> StageResult:
        layout = self.layout
        layout.require(layout.dataset_dir / "manifest.jsonl", "forge")
        model = GeneratorModel.load(layout.require(layout.generator_path, "train-gen"))
        manifest = load_dataset(layout.dataset_dir, seed=self.cfg.seed)

        codes, labels = latent_codes(model, manifest.train_pairs())
        grid, lm = train_som(None, list(zip(codes, labels)), self.cfg.som_config())
        save_som(layout.som_path, grid, lm)
        clusters = layout.report("som_clusters.csv")
        save_clusters(clusters, grid, lm)

        return StageResult(
            stage="train-som",
            outputs={"atlas": str(layout.som_path), "clusters": str(clusters)},
            summary={
                "samples": lm.total,
                "quantization_error": grid.quantization_trace[-1],
                "populated_nodes": int((lm.counts.sum(axis=1) > 0).sum()),
            },
        )
