from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from longicause.config import settings
from longicause.schemas.model import CdvaeConfig
from longicause.schemas.synth import SynthConfig
from longicause.schemas.train import TrainConfig
from longicause.schemas.tumor import TumorConfig

COMMANDS = ("generate", "tumor-sim", "train", "evaluate", "ablate", "sweep", "gradcheck")
MULTI_SEED_COMMANDS = ("train", "evaluate", "ablate", "sweep")

Command = Literal["generate", "tumor-sim", "train", "evaluate", "ablate", "sweep", "gradcheck"]

# The latent-free model: no inference network, so KL and moment matching vanish
LATENT_ABLATION: Dict[str, Any] = {"z_dim": 0, "lambda_mm": 0.0}


def default_gammas() -> List[float]:
    return [round(0.1 + 0.2 * k, 10) for k in range(10)]


def default_sweep_variants() -> Dict[str, Dict[str, Any]]:
    return {"cdvae": {}, "no_latent": dict(LATENT_ABLATION)}


class DataConfig(BaseModel):
    """Where the panel comes from and how it is split."""
    model_config = ConfigDict(extra="forbid")

    source: Literal["synth", "tumor", "file"] = "synth"
    path: Optional[str] = None
    fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: Optional[int] = Field(default=None, ge=0, description="Defaults to the run seed")

    @field_validator("fractions")
    @classmethod
    def check_fractions(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(f <= 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("fractions must be positive and sum to 1")
        return v


class EvaluateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: Optional[str] = None
    split: Literal["train", "val", "test"] = "test"


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gammas: List[float] = Field(default_factory=default_gammas)
    metric: str = "nrmse_tau"
    variants: Dict[str, Dict[str, Any]] = Field(default_factory=default_sweep_variants)

    @field_validator("gammas")
    @classmethod
    def check_gammas(cls, v: List[float]) -> List[float]:
        if len(v) < 2:
            raise ValueError("a sweep needs at least two gamma values")
        return v


class GradcheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tolerance: float = Field(default=1e-3, gt=0.0)
    n_units: int = Field(default=5, ge=2)
    T: int = Field(default=4, ge=2)
    d_x: int = Field(default=3, ge=1)
    beta: float = Field(default=0.37, ge=0.0, le=1.0)
    step: float = Field(default=1e-5, gt=0.0)


class ExperimentConfig(BaseModel):
    """Content of a run config file; unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    data: DataConfig = Field(default_factory=DataConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    tumor: TumorConfig = Field(default_factory=TumorConfig)
    model: CdvaeConfig = Field(default_factory=CdvaeConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    grid: Dict[str, List[Any]] = Field(default_factory=dict)
    seeds: List[int] = Field(default_factory=lambda: list(settings.DEFAULT_SEEDS))


class RunConfig(BaseModel):
    """One CLI invocation."""
    model_config = ConfigDict(extra="forbid")

    command: Command
    config_path: Optional[Path] = None
    out_dir: Optional[Path] = None
    seeds: Optional[List[int]] = None
    overrides: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, v: Optional[List[int]]) -> Optional[List[int]]:
        if v is not None and not v:
            raise ValueError("seed list must not be empty")
        if v is not None and any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative")
        return v


class GradcheckReport(BaseModel):
    """Analytic vs central-difference gradients, per parameter tensor."""
    per_tensor: Dict[str, float]
    max_error: float
    worst_tensor: str
    tolerance: float
    passed: bool
    n_parameters: int
    loss: float
