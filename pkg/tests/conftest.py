import numpy as np
import pytest
import torch

from longicause.models.panel import BatchTensors, PanelDataset
from longicause.schemas.dataset import DatasetMeta
from longicause.schemas.model import AnnealingConfig, CdvaeConfig
from longicause.schemas.synth import SynthConfig
from longicause.schemas.train import TrainConfig
from longicause.schemas.tumor import TumorConfig
from longicause.services.synth_service import SynthService


@pytest.fixture
def tiny_synth_cfg() -> SynthConfig:
    """Small synthetic generator config."""
    return SynthConfig(n=40, T=6, d_x=3, d_u=3, p=2, seed=7)


@pytest.fixture
def tiny_dataset(tiny_synth_cfg) -> PanelDataset:
    """Small synthetic panel with ground truth."""
    return SynthService.generate_dataset(tiny_synth_cfg)


@pytest.fixture
def tiny_tumor_cfg() -> TumorConfig:
    """Small tumor cohort config."""
    return TumorConfig(n_patients=30, T_days=12, seed=3)


@pytest.fixture
def tiny_model_cfg() -> CdvaeConfig:
    """Small network with every loss term active."""
    return CdvaeConfig(
        d_x=3,
        lstm_hidden=4,
        phi_dim=4,
        z_dim=2,
        annealing=AnnealingConfig(n_iter=20),
    )


@pytest.fixture
def tiny_train_cfg() -> TrainConfig:
    """Few epochs in double precision."""
    return TrainConfig(batch_size=16, max_epochs=3, learning_rate=1e-2, dtype="float64", seed=0)


@pytest.fixture
def tiny_batch() -> BatchTensors:
    """Float64 batch of 6 units over 4 steps with both arms at every step."""
    generator = torch.Generator().manual_seed(11)
    x = torch.randn((6, 4, 3), generator=generator, dtype=torch.float64)
    w = ((torch.arange(6).unsqueeze(1) + torch.arange(4).unsqueeze(0)) % 2).to(torch.float64)
    y = 0.3 * torch.randn((6, 4), generator=generator, dtype=torch.float64)
    return BatchTensors(x=x, w=w, y=y)


def make_panel(n: int = 4, T: int = 3, d_x: int = 2, seed: int = 0, with_truth: bool = True) -> PanelDataset:
    """Hand-built panel satisfying every invariant."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, T, d_x))
    w = rng.integers(0, 2, size=(n, T)).astype(np.int8)
    y1 = rng.normal(size=(n, T))
    y0 = rng.normal(size=(n, T))
    y = np.where(w == 1, y1, y0)
    meta = DatasetMeta(n=n, T=T, d_x=d_x)
    if not with_truth:
        return PanelDataset(x=x, w=w, y=y, meta=meta)
    return PanelDataset(
        x=x, w=w, y=y, meta=meta, y1=y1, y0=y0, tau=y1 - y0,
        u=rng.normal(size=(n, 2)), cluster=rng.integers(0, 3, size=n),
    )


@pytest.fixture
def small_panel() -> PanelDataset:
    return make_panel()
