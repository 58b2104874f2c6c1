"""
Configuration Management for IMRE Experiments
=============================================

Handles configuration loading from environment variables and flat key=value
config files, and derives the per-module parameter models from it.
"""

from pathlib import Path
from typing import Any, List, Optional, Tuple, Type

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from .cardiac import APParams
from .dfo import DfoConfig
from .forge import DEFAULT_CLASSES, ErrorLabel
from .generator import GeneratorConfig
from .inverse import Convergence
from .som import SomTrainConfig

STAGE_NAMES = ["forge", "train-gen", "train-som", "simulate", "invert", "evaluate"]


class ExperimentConfig(BaseSettings):
    """Configuration settings for one desk-scale experiment."""

    # Run Configuration
    seed: int = Field(default=0, ge=0, description="Base seed for every RNG stream")
    out_dir: str = Field(default="runs/desk", description="Output directory")
    stages: List[str] = Field(
        default_factory=lambda: list(STAGE_NAMES),
        description="Enabled pipeline stages",
    )

    # Logging Configuration
    log_level: str = Field(default="INFO", description="Logging level")
    log_format: str = Field(default="json", description="json or console")
    log_file: Optional[str] = Field(default=None, description="Log file path")

    # Dataset Configuration
    n_source: int = Field(default=96, ge=8, description="Source (heart) node count")
    n_sensor: int = Field(default=64, ge=8, description="Sensor (torso) node count")
    dataset_count: int = Field(default=120, ge=2, description="Erroneous operators")
    dataset_classes: List[str] = Field(
        default_factory=lambda: [label.value for label in DEFAULT_CLASSES],
        description="Error classes sampled by the forge",
    )
    pairing: str = Field(default="base", description="base or exhaustive")

    # Generator Configuration
    gen_epochs: int = Field(default=100, ge=1)
    gen_batch_size: int = Field(default=64, ge=1)
    gen_latent_dim: int = Field(default=16, ge=1)
    gen_beta: float = Field(default=0.001, gt=0.0)
    gen_lambda_reg: float = Field(default=0.02, ge=0.0)
    gen_hidden_widths: List[int] = Field(default_factory=lambda: [128, 32])
    gen_learning_rate: float = Field(default=1e-3, gt=0.0)

    # SOM Configuration
    som_width: int = Field(default=10, ge=1)
    som_height: int = Field(default=10, ge=1)
    som_epochs: int = Field(default=200, ge=1)
    som_gamma_initial: float = Field(default=0.5)
    som_gamma_final: float = Field(default=0.01)
    som_radius_initial: float = Field(default=5.0, gt=0.0)
    som_radius_final: float = Field(default=0.5, gt=0.0)
    som_neighborhood: str = Field(default="gaussian")
    som_update_rule: str = Field(default="kohonen")

    # Simulation Configuration
    ap_dt: float = Field(default=0.05, gt=0.0)
    ap_steps: int = Field(default=1000, ge=2)
    ap_diffusion: float = Field(default=0.8, gt=0.0)
    ap_record_every: int = Field(default=10, ge=1)
    n_pacing_sites: int = Field(default=3, ge=1)
    n_cases: int = Field(default=24, ge=1)
    snr_db: float = Field(default=35.0, gt=0.0)

    # Inverse Configuration
    inv_lambda: float = Field(default=0.02, ge=0.0)
    inv_lcurve: bool = Field(default=True, description="Pick lambda by L-curve")
    dfo_bound: float = Field(default=3.0, gt=0.0)
    dfo_budget: int = Field(default=300, ge=3)
    dfo_initial_radius: float = Field(default=1.0, gt=0.0)
    dfo_tolerance: float = Field(default=1e-6, gt=0.0)
    tol_u: float = Field(default=1e-4, gt=0.0)
    tol_h: float = Field(default=1e-4, gt=0.0)
    max_outer: int = Field(default=10, ge=1)

    # Compute Configuration
    max_workers: int = Field(default=0, ge=0, description="0 picks from CPU count")
    cpu_threshold: float = Field(default=0.8, gt=0.0, le=1.0)
    memory_threshold: float = Field(default=0.85, gt=0.0, le=1.0)

    model_config = SettingsConfigDict(
        env_file=None,
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="forbid",
        validate_assignment=True,
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # config file beats the environment; explicit overrides beat both
        return init_settings, dotenv_settings, env_settings

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of {valid_levels}")
        return v.upper()

    @field_validator("log_format")
    @classmethod
    def validate_log_format(cls, v: str) -> str:
        if v not in ("json", "console"):
            raise ValueError("Log format must be 'json' or 'console'")
        return v

    @field_validator("stages")
    @classmethod
    def validate_stages(cls, v: List[str]) -> List[str]:
        unknown = [name for name in v if name not in STAGE_NAMES]
        if unknown:
            raise ValueError(f"Unknown stages {unknown}; valid: {STAGE_NAMES}")
        return v

    @field_validator("dataset_classes")
    @classmethod
    def validate_classes(cls, v: List[str]) -> List[str]:
        valid = [label.value for label in ErrorLabel]
        unknown = [name for name in v if name not in valid]
        if unknown:
            raise ValueError(f"Unknown error classes {unknown}; valid: {valid}")
        if len(set(v)) != len(v) or not v:
            raise ValueError("Error classes must be non-empty and distinct")
        return v

    @field_validator("pairing")
    @classmethod
    def validate_pairing(cls, v: str) -> str:
        if v not in ("base", "exhaustive"):
            raise ValueError("Pairing must be 'base' or 'exhaustive'")
        return v

    @field_validator("som_gamma_initial", "som_gamma_final")
    @classmethod
    def validate_gamma(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("SOM learning rate must lie in (0, 1]")
        return v

    def is_stage_enabled(self, stage: str) -> bool:
        """Check if a stage is enabled."""
        return stage in self.stages

    def get_out_path(self) -> Path:
        """Get the full path to the output directory."""
        return Path(self.out_dir).resolve()

    def error_classes(self) -> List[ErrorLabel]:
        return [ErrorLabel(name) for name in self.dataset_classes]

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            epochs=self.gen_epochs,
            batch_size=self.gen_batch_size,
            latent_dim=self.gen_latent_dim,
            beta=self.gen_beta,
            lambda_reg=self.gen_lambda_reg,
            hidden_widths=list(self.gen_hidden_widths),
            learning_rate=self.gen_learning_rate,
            seed=self.seed,
        )

    def som_config(self) -> SomTrainConfig:
        return SomTrainConfig(
            width=self.som_width,
            height=self.som_height,
            gamma=(self.som_gamma_initial, self.som_gamma_final),
            radius=(self.som_radius_initial, self.som_radius_final),
            kind=self.som_neighborhood,
            update_rule=self.som_update_rule,
            epochs=self.som_epochs,
            seed=self.seed,
        )

    def ap_params(self) -> APParams:
        return APParams(
            dt=self.ap_dt,
            steps=self.ap_steps,
            diffusion=self.ap_diffusion,
            record_every=self.ap_record_every,
        )

    def dfo_config(self) -> DfoConfig:
        dim = self.gen_latent_dim
        return DfoConfig(
            lower=[-self.dfo_bound] * dim,
            upper=[self.dfo_bound] * dim,
            budget=max(self.dfo_budget, 2 * dim + 1),
            initial_radius=self.dfo_initial_radius,
            tolerance=self.dfo_tolerance,
        )

    def convergence(self) -> Convergence:
        return Convergence(tol_u=self.tol_u, tol_h=self.tol_h, max_outer=self.max_outer)


def load_config(config_path: Optional[str] = None, **overrides: Any) -> ExperimentConfig:
    """Load settings from defaults, environment, an optional config file and overrides."""
    if config_path is not None and not Path(config_path).exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")
    values = {key: value for key, value in overrides.items() if value is not None}
    return ExperimentConfig(_env_file=config_path, **values)


def create_default_config_file(path: str = "imre.env") -> None:
    """Create a default configuration file."""
    config_template = """# IMRE experiment configuration
# Flat key=value pairs; each key is an ExperimentConfig field.

# Run Configuration
SEED=0
OUT_DIR=runs/desk
STAGES=["forge", "train-gen", "train-som", "simulate", "invert", "evaluate"]

# Logging Configuration
LOG_LEVEL=INFO
LOG_FORMAT=json
# LOG_FILE=imre.log

# Dataset Configuration
N_SOURCE=96
N_SENSOR=64
DATASET_COUNT=120
DATASET_CLASSES=["rot_z", "trans_x", "trans_y", "trans_z", "scale", "inhomogeneity"]
PAIRING=base

# Generator Configuration
GEN_EPOCHS=100
GEN_BATCH_SIZE=64
GEN_LATENT_DIM=16
GEN_BETA=0.001
GEN_LAMBDA_REG=0.02
GEN_HIDDEN_WIDTHS=[128, 32]

# SOM Configuration
SOM_WIDTH=10
SOM_HEIGHT=10
SOM_EPOCHS=200
SOM_NEIGHBORHOOD=gaussian
SOM_UPDATE_RULE=kohonen

# Simulation Configuration
AP_DT=0.05
AP_STEPS=1000
N_PACING_SITES=3
N_CASES=24
SNR_DB=35.0

# Inverse Configuration
INV_LAMBDA=0.02
INV_LCURVE=true
DFO_BOUND=3.0
DFO_BUDGET=300
MAX_OUTER=10
"""

    with open(path, "w", encoding="utf-8") as f:
        f.write(config_template)
