"""Pydantic schemas for configuration files and reports."""
from longicause.schemas.synth import SynthConfig
from longicause.schemas.tumor import TumorConfig, LogNormalPrior
from longicause.schemas.model import CdvaeConfig, AnnealingConfig
from longicause.schemas.train import TrainConfig, SwaConfig, TrainLog, EpochRecord
from longicause.schemas.metrics import MetricsReport, PairedTestResult
from longicause.schemas.dataset import DatasetMeta
from longicause.schemas.run import (
    DataConfig,
    EvaluateConfig,
    SweepConfig,
    GradcheckConfig,
    GradcheckReport,
    ExperimentConfig,
    RunConfig,
)

__all__ = [
    "SynthConfig",
    "TumorConfig",
    "LogNormalPrior",
    "CdvaeConfig",
    "AnnealingConfig",
    "TrainConfig",
    "SwaConfig",
    "TrainLog",
    "EpochRecord",
    "MetricsReport",
    "PairedTestResult",
    "DatasetMeta",
    "DataConfig",
    "EvaluateConfig",
    "SweepConfig",
    "GradcheckConfig",
    "GradcheckReport",
    "ExperimentConfig",
    "RunConfig",
]
