from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class SwaConfig(BaseModel):
    """Stochastic weight averaging."""
    model_config = ConfigDict(extra="forbid")

    enabled: bool = False
    lr: float = Field(default=1e-2, gt=0.0)
    anneal_epochs: int = Field(default=3, ge=1)
    start_epoch: Optional[int] = Field(default=None, ge=1, description="Defaults to max_epochs // 2")


class TrainConfig(BaseModel):
    """Optimisation protocol."""
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=128, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    patience: int = Field(default=4, ge=1)
    min_delta: float = Field(default=0.0, ge=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    clip_norm: float = Field(default=0.5, gt=0.0)
    learning_rate: float = Field(default=3e-4, gt=0.0)
    swa: SwaConfig = Field(default_factory=SwaConfig)
    dtype: Literal["float32", "float64"] = "float32"
    seed: int = Field(default=0, ge=0)


class EpochRecord(BaseModel):
    epoch: int
    train: Dict[str, float]
    val: Dict[str, float]
    lr: float
    ot_non_converged: int = Field(default=0, ge=0, description="Training transport plans that missed the tolerance")


class TrainLog(BaseModel):
    """Per-epoch history of one training run."""
    epochs: List[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    stop_reason: Optional[Literal["early_stop", "max_epochs"]] = None
    wall_time: float = 0.0
    iterations: int = 0
    planned_iterations: int = 0
    final_beta: float = 0.0
    swa_used: bool = False
