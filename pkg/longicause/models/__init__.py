from longicause.models.cdvae import CdvaeNetwork, PosteriorStats
from longicause.models.panel import Batch, BatchTensors, DataSplit, PanelDataset

__all__ = [
    "Batch",
    "BatchTensors",
    "CdvaeNetwork",
    "DataSplit",
    "PanelDataset",
    "PosteriorStats",
]
