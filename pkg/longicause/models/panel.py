"""
Longitudinal panel data model.
"""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch

from longicause.schemas.dataset import DatasetMeta


def _frozen(array: Optional[np.ndarray], dtype) -> Optional[np.ndarray]:
    if array is None:
        return None
    out = np.ascontiguousarray(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PanelDataset:
    """
    n units observed over T steps.

    x: covariates [n, T, d_x]; w: binary treatments [n, T]; y: observed
    responses [n, T]. Optional ground truth: potential outcomes y1/y0 and
    effects tau [n, T], adjustment vectors u [n, d_u], cluster labels [n].
    Arrays are read-only once the dataset is built.
    """
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    meta: DatasetMeta
    ids: Optional[np.ndarray] = None
    y1: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None
    tau: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    cluster: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = int(np.shape(self.x)[0])
        object.__setattr__(self, "x", _frozen(self.x, np.float64))
        object.__setattr__(self, "w", _frozen(self.w, np.int8))
        object.__setattr__(self, "y", _frozen(self.y, np.float64))
        ids = np.arange(n, dtype=np.int64) if self.ids is None else self.ids
        object.__setattr__(self, "ids", _frozen(ids, np.int64))
        for name in ("y1", "y0", "tau", "u"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))
        object.__setattr__(self, "cluster", _frozen(self.cluster, np.int64))

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def T(self) -> int:
        return self.meta.T

    @property
    def d_x(self) -> int:
        return self.meta.d_x

    @property
    def d_u(self) -> int:
        return 0 if self.u is None else int(self.u.shape[1])

    @property
    def has_potential_outcomes(self) -> bool:
        return self.y1 is not None and self.y0 is not None

    def subset(self, idx: np.ndarray) -> "PanelDataset":
        """Dataset restricted to the given unit positions."""
        idx = np.asarray(idx, dtype=np.int64)

        def take(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if a is None else a[idx]

        return PanelDataset(
            x=self.x[idx],
            w=self.w[idx],
            y=self.y[idx],
            meta=self.meta.model_copy(update={"n": int(idx.size)}),
            ids=self.ids[idx],
            y1=take(self.y1),
            y0=take(self.y0),
            tau=take(self.tau),
            u=take(self.u),
            cluster=take(self.cluster),
        )


@dataclass(frozen=True)
class DataSplit:
    """Disjoint train / validation / test unit positions."""
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    seed: int

    def by_name(self, name: str) -> np.ndarray:
        return {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]

    @property
    def sizes(self) -> tuple:
        return (int(self.train_idx.size), int(self.val_idx.size), int(self.test_idx.size))


class BatchTensors(NamedTuple):
    x: torch.Tensor  # [B, T, d_x]
    w: torch.Tensor  # [B, T]
    y: torch.Tensor  # [B, T]


@dataclass(frozen=True)
class Batch:
    """Whole trajectories of at most batch_size units."""
    dataset: PanelDataset = field(repr=False)
    idx: np.ndarray

    @property
    def size(self) -> int:
        return int(self.idx.size)

    @property
    def ids(self) -> np.ndarray:
        return self.dataset.ids[self.idx]

    def to_tensors(self, dtype: torch.dtype = torch.float32) -> BatchTensors:
        d = self.dataset
        return BatchTensors(
            x=torch.as_tensor(d.x[self.idx], dtype=dtype),
            w=torch.as_tensor(d.w[self.idx], dtype=dtype),
            y=torch.as_tensor(d.y[self.idx], dtype=dtype),
        )
