import math
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


def sphere_volume(diameter: float) -> float:
    """Volume (cm^3) of a sphere with the given diameter (cm)."""
    return math.pi * diameter ** 3 / 6.0


class LogNormalPrior(BaseModel):
    """Lognormal prior given by its mean and coefficient of variation."""
    model_config = ConfigDict(extra="forbid")

    mean: float = Field(gt=0.0)
    cv: float = Field(default=0.0, ge=0.0, description="Coefficient of variation (0 = deterministic)")


class TumorConfig(BaseModel):
    """Parameters of the PK-PD radiotherapy tumor-growth simulator."""
    model_config = ConfigDict(extra="forbid")

    n_patients: int = Field(default=1000, ge=0)
    T_days: int = Field(default=60, ge=1)
    gamma_r: float = Field(default=5.0, ge=0.0, description="Confounding strength")
    D_max: float = Field(default=13.0, gt=0.0, description="Maximum tumor diameter (cm)")
    delta_r: Optional[float] = Field(default=None, description="Assignment offset (cm); defaults to D_max / 2")
    dose: float = Field(default=2.0, ge=0.0, description="Radiation dose (Gy) on treated days")
    window: int = Field(default=15, ge=1, description="Days averaged in the diameter history")
    cluster_multiplier: float = Field(default=1.5, gt=0.0)
    V_max: float = Field(default=1150.34, gt=0.0, description="Volume cap and normaliser (cm^3)")

    lambda_prior: LogNormalPrior = Field(default=LogNormalPrior(mean=7.0e-5, cv=0.5))
    growth_scale: float = Field(
        default=430.0,
        gt=0.0,
        description=(
            "Multiplier on the growth-rate prior mean; the default puts the mean rate near 0.03 per day so "
            "untreated tumors cross the assignment offset within a 60-day horizon"
        ),
    )
    capacity_prior: Optional[LogNormalPrior] = Field(
        default=None, description="Carrying capacity prior; defaults to the volume of a D_max sphere"
    )
    kappa_prior: LogNormalPrior = Field(default=LogNormalPrior(mean=0.0398, cv=0.5))
    alpha_beta_ratio: float = Field(default=10.0, gt=0.0, description="upsilon = kappa_rd / ratio")
    initial_diameter_low: float = Field(default=1.0, gt=0.0)
    initial_diameter_high: float = Field(default=4.0, gt=0.0)
    noise_std: float = Field(default=0.01, ge=0.0, description="Std of the multiplicative noise e_t")
    min_volume: float = Field(default=1e-3, gt=0.0, description="Lower clip of the volume (cm^3)")
    max_resample: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_ranges(self) -> "TumorConfig":
        if self.initial_diameter_high <= self.initial_diameter_low:
            raise ValueError("initial_diameter_high must exceed initial_diameter_low")
        if self.min_volume >= self.V_max:
            raise ValueError("min_volume must be below V_max")
        return self

    @property
    def offset(self) -> float:
        return self.D_max / 2.0 if self.delta_r is None else self.delta_r

    @property
    def capacity(self) -> LogNormalPrior:
        if self.capacity_prior is not None:
            return self.capacity_prior
        return LogNormalPrior(mean=sphere_volume(self.D_max), cv=0.0)
