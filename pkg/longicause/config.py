from typing import List
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, field_validator


class Settings(BaseSettings):
    """Process-wide defaults loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )

    # Project Info
    PROJECT_NAME: str = "longicause"
    VERSION: str = "1.0.0"
    ENVIRONMENT: str = Field(default="development", description="Environment: development, test, production")

    # Output
    OUTPUT_DIR: str = Field(default="./runs", description="Root directory for run artifacts")
    DEFAULT_SEEDS: List[int] = Field(
        default=[1, 2, 3, 4, 5],
        description="Seeds used by multi-seed commands when none are given"
    )

    # Compute
    TORCH_NUM_THREADS: int = Field(default=0, description="torch intra-op threads (0 keeps the torch default)")

    # Numerics
    PROPENSITY_CLIP: float = Field(default=1e-3, description="Propensities are clamped to [clip, 1 - clip] for weighting")
    VARIANCE_FLOOR: float = Field(default=1e-6, description="Lower bound of the posterior variance")
    OT_LAMBDA: float = Field(default=10.0, description="Entropic kernel sharpness (K = exp(-lambda M))")
    OT_TOLERANCE: float = Field(default=1e-6, description="Sinkhorn marginal tolerance")
    OT_MAX_ITER: int = Field(default=100, description="Sinkhorn iteration cap")
    OT_FALLBACK_MAX_ITER: int = Field(
        default=100_000, description="Iteration budget of the log-domain epsilon-scaling fallback"
    )
    OT_LAMBDA_START: float = Field(default=1.0, description="First kernel sharpness of the epsilon-scaling schedule")

    # Logging
    LOG_LEVEL: str = Field(default="INFO", description="Logging level (DEBUG, INFO, WARNING, ERROR)")
    LOG_CONSOLE_LEVEL: str = Field(default="INFO", description="Console handler level")
    LOG_DIR: str = Field(default="./logs", description="Directory for log files")
    LOG_RETENTION_DAYS: int = Field(default=30, description="Number of days to keep log files")

    @field_validator('PROPENSITY_CLIP')
    @classmethod
    def validate_propensity_clip(cls, v: float) -> float:
        if not 0.0 < v < 0.5:
            raise ValueError('PROPENSITY_CLIP must lie in (0, 0.5)')
        return v

    @field_validator('DEFAULT_SEEDS')
    @classmethod
    def validate_default_seeds(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError('DEFAULT_SEEDS must not be empty')
        return v

    def get_log_level(self) -> str:
        """Get log level based on environment."""
        if self.ENVIRONMENT.lower() in ["development", "dev", "test"]:
            return "DEBUG"
        return self.LOG_LEVEL.upper()


settings = Settings()
