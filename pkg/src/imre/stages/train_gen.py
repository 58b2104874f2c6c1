"""Generator training stage."""

from ..forge import load_dataset
from ..generator import GeneratorModel, train
from .base import PipelineStage, StageMetadata, StageResult, registry


@registry.register("train-gen")
class TrainGeneratorStage(PipelineStage):
    def get_metadata(self) -> StageMetadata:
        return StageMetadata(
            name="train-gen",
            description="Train both encoders and the decoder of the error generator",
            requires=["dataset/manifest.jsonl"],
            produces=["model/generator.imp", "reports/training_log.csv"],
        )

    def run(self) -> StageResult:
        layout = self.layout
        layout.require(layout.dataset_dir / "manifest.jsonl", "forge")
        manifest = load_dataset(layout.dataset_dir, seed=self.cfg.seed)
        gen_cfg = self.cfg.generator_config()

        shape = manifest.pairs[0].h_i.shape
        result = train(GeneratorModel.initialize(shape, gen_cfg), manifest, gen_cfg)
        result.model.save(layout.generator_path)
        log_path = layout.report("training_log.csv")
        result.save_log(log_path)

        final = result.curve[-1]
        return StageResult(
            stage="train-gen",
            outputs={"model": str(layout.generator_path), "training_log": str(log_path)},
            summary={"epochs": final.epoch, "final_loss": final.total,
                     "first_loss": result.curve[0].total},
        )
