from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from longicause.config import settings

WeightScheme = Literal["iptw", "matching", "overlap"]


class AnnealingConfig(BaseModel):
    """Cyclical KL annealing schedule."""
    model_config = ConfigDict(extra="forbid")

    enabled: bool = Field(default=True, description="False holds beta at constant_beta")
    M: int = Field(default=6, ge=1, description="Number of cycles")
    R: float = Field(default=0.5, gt=0.0, le=1.0, description="Increasing fraction of each cycle")
    n_iter: Optional[int] = Field(default=None, ge=1, description="Total iterations; derived from training when unset")
    constant_beta: float = Field(default=1.0, ge=0.0, le=1.0)


class CdvaeConfig(BaseModel):
    """Architecture and loss coefficients of the CDVAE network."""
    model_config = ConfigDict(extra="forbid")

    d_x: Optional[int] = Field(default=None, ge=1, description="Covariate dimension; taken from the dataset when unset")
    lstm_hidden: int = Field(default=32, ge=1)
    lstm_layers: int = Field(default=1, ge=1, le=3)
    lstm_dropout: float = Field(default=0.0, ge=0.0, le=0.5)
    phi_dim: int = Field(default=36, ge=1)
    z_dim: int = Field(default=22, ge=0, description="0 disables the latent adjustment vector")
    leaky_slope: float = Field(default=0.01, ge=0.0)
    sigma_y: float = Field(default=0.1, gt=0.0)
    lambda_w: float = Field(default=0.65, ge=0.0)
    lambda_ipm: float = Field(default=0.45, ge=0.0)
    lambda_mm: float = Field(default=3.75, ge=0.0)
    weight_scheme: WeightScheme = "overlap"
    annealing: AnnealingConfig = Field(default_factory=AnnealingConfig)
    lambda_ot: float = Field(default_factory=lambda: settings.OT_LAMBDA, gt=0.0)
    ot_tolerance: float = Field(default_factory=lambda: settings.OT_TOLERANCE, gt=0.0)
    ot_max_iter: int = Field(default_factory=lambda: settings.OT_MAX_ITER, ge=1)
    seed: int = Field(default=0, ge=0)

    def with_input_dim(self, d_x: int) -> "CdvaeConfig":
        return self.model_copy(update={"d_x": d_x})

    @property
    def has_latent(self) -> bool:
        return self.z_dim > 0
