from typing import Dict, List, Optional

from pydantic import BaseModel, Field

METRIC_NAMES = ("nae_ate", "nmae_tau", "nrmse_tau", "nmae_y", "nrmse_y", "pehe")


class MetricsReport(BaseModel):
    """Evaluation metrics; for multi-seed reports the fields hold the seed means."""
    nae_ate: float = Field(ge=0.0)
    nmae_tau: float = Field(ge=0.0)
    nrmse_tau: float = Field(ge=0.0)
    nmae_y: float = Field(ge=0.0)
    nrmse_y: float = Field(ge=0.0)
    pehe: float = Field(ge=0.0)
    nrmse_cf: Optional[float] = Field(default=None, ge=0.0)
    n_seeds: int = 1
    std: Dict[str, float] = Field(default_factory=dict)
    per_seed: Dict[str, List[float]] = Field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        out = {name: getattr(self, name) for name in METRIC_NAMES}
        if self.nrmse_cf is not None:
            out["nrmse_cf"] = self.nrmse_cf
        return out


class PairedTestResult(BaseModel):
    """Two-sided paired tests between seed-matched samples."""
    n: int
    mean_difference: float
    p_t: float = Field(ge=0.0, le=1.0)
    p_wilcoxon: float = Field(ge=0.0, le=1.0)
