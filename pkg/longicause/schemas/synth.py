from pydantic import BaseModel, ConfigDict, Field, model_validator


class SynthConfig(BaseModel):
    """Parameters of the autoregressive synthetic panel generator."""
    model_config = ConfigDict(extra="forbid")

    n: int = Field(default=1000, ge=0, description="Number of units")
    T: int = Field(default=35, ge=1, description="Number of timesteps")
    d_x: int = Field(default=100, ge=1, description="Covariate dimension")
    d_u: int = Field(default=100, ge=1, description="Adjustment-vector dimension (must equal d_x)")
    p: int = Field(default=8, ge=1, description="Autoregression order")
    rho: float = Field(default=0.3, ge=0.0, lt=1.0, description="Covariate error correlation")
    sigma2: float = Field(default=0.2, gt=0.0, description="Covariate error scale")
    gamma1_yx: float = Field(default=0.9, description="Mean of the treated-arm risk-factor coefficients")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_hadamard_dims(self) -> "SynthConfig":
        if self.d_u != self.d_x:
            raise ValueError("d_u must equal d_x (Hadamard product X * U)")
        return self
