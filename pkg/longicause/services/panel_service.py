import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from longicause.core.exceptions import (
    ConsistencyViolationError,
    DatasetFormatError,
    EmptySelectionError,
    SplitError,
    ValidationError,
)
from longicause.core.logging_utils import format_log_message
from longicause.core.rng import Purpose, substream
from longicause.models.panel import Batch, DataSplit, PanelDataset
from longicause.schemas.dataset import DatasetMeta

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
OPTIONAL_SERIES = ("y1", "y0", "tau")


def sidecar_path(path: PathLike) -> Path:
    """`<name>.jsonl` -> `<name>.meta.json`."""
    path = Path(path)
    stem = path.name[:-len(".jsonl")] if path.name.endswith(".jsonl") else path.stem
    return path.with_name(f"{stem}.meta.json")


class PanelService:
    """Service for panel validation, JSONL persistence, splitting and batching."""

    @staticmethod
    def validate_dataset(d: PanelDataset) -> None:
        """
        Check every PanelDataset invariant.

        Raises:
            DatasetFormatError: Shape mismatch, non-binary treatment or non-finite values
            ConsistencyViolationError: Observed outcome differs from the selected potential outcome
        """
        n, T, d_x = d.n, d.T, d.d_x
        if d.meta.n != n:
            raise DatasetFormatError(f"dimension mismatch: sidecar n={d.meta.n}, data n={n}")
        if d.x.shape != (n, T, d_x):
            raise DatasetFormatError(f"dimension mismatch: x has shape {d.x.shape}, expected {(n, T, d_x)}")
        for name in ("w", "y") + OPTIONAL_SERIES:
            series = getattr(d, name)
            if series is not None and series.shape != (n, T):
                raise DatasetFormatError(f"dimension mismatch: {name} has shape {series.shape}, expected {(n, T)}")
        if d.u is not None and (d.u.ndim != 2 or d.u.shape[0] != n):
            raise DatasetFormatError(f"dimension mismatch: u has shape {d.u.shape}")
        if d.cluster is not None and d.cluster.shape != (n,):
            raise DatasetFormatError(f"dimension mismatch: cluster has shape {d.cluster.shape}")
        if d.ids is not None and np.unique(d.ids).size != n:
            raise DatasetFormatError("duplicate unit ids")

        if not np.all((d.w == 0) | (d.w == 1)):
            raise DatasetFormatError("non-binary treatment")

        for name in ("x", "y", "u") + OPTIONAL_SERIES:
            series = getattr(d, name)
            if series is not None and not np.all(np.isfinite(series)):
                raise DatasetFormatError(f"non-finite values in {name}")

        if (d.y1 is None) != (d.y0 is None):
            raise DatasetFormatError("y1 and y0 must be given together")
        if d.has_potential_outcomes:
            selected = np.where(d.w == 1, d.y1, d.y0)
            bad = np.argwhere(selected != d.y)
            if bad.size:
                i, t = bad[0]
                raise ConsistencyViolationError(
                    f"consistency violation at unit {int(d.ids[i])}, t={int(t)}: "
                    f"y={d.y[i, t]!r}, selected potential outcome={selected[i, t]!r}"
                )
            if d.tau is not None and not np.array_equal(d.tau, d.y1 - d.y0):
                raise ConsistencyViolationError("consistency violation: tau != y1 - y0")
        elif d.tau is not None:
            logger.debug("tau present without potential outcomes; identity tau == y1 - y0 not checked")

    @staticmethod
    def save_dataset(d: PanelDataset, path: PathLike) -> None:
        """
        Write one JSON line per unit plus the metadata sidecar.

        Args:
            d: Valid dataset
            path: Target `<name>.jsonl` file

        Raises:
            OSError: On I/O failure
        """
        PanelService.validate_dataset(d)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        meta = d.meta.model_copy(update={"n": d.n, "d_u": d.d_u})
        sidecar_path(path).write_text(meta.model_dump_json(indent=2), encoding="utf-8")

        with path.open("w", encoding="utf-8") as fh:
            for i in range(d.n):
                record: Dict[str, Any] = {
                    "id": int(d.ids[i]),
                    "x": d.x[i].tolist(),
                    "w": [int(v) for v in d.w[i]],
                    "y": d.y[i].tolist(),
                }
                for name in OPTIONAL_SERIES + ("u",):
                    series = getattr(d, name)
                    if series is not None:
                        record[name] = series[i].tolist()
                if d.cluster is not None:
                    record["cluster"] = int(d.cluster[i])
                fh.write(json.dumps(record, allow_nan=False))
                fh.write("\n")

        logger.info(format_log_message("Dataset written", path=str(path), n=d.n, T=d.T, d_x=d.d_x))

    @staticmethod
    def load_dataset(path: PathLike) -> PanelDataset:
        """
        Read a JSONL panel file and its sidecar.

        Args:
            path: `<name>.jsonl` file

        Returns:
            Validated PanelDataset

        Raises:
            DatasetFormatError: Missing sidecar, malformed lines, dimension mismatch, non-binary treatment
            ConsistencyViolationError: Observed outcomes disagree with potential outcomes
        """
        path = Path(path)
        meta_file = sidecar_path(path)
        if not meta_file.exists():
            raise DatasetFormatError(f"missing sidecar: {meta_file}")
        if not path.exists():
            raise DatasetFormatError(f"missing data file: {path}")

        try:
            meta = DatasetMeta.model_validate_json(meta_file.read_text(encoding="utf-8"))
        except ValueError as e:
            raise DatasetFormatError(f"invalid sidecar {meta_file}: {e}")

        records: List[Dict[str, Any]] = []
        with path.open("r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise DatasetFormatError(f"line {line_no}: invalid JSON ({e.msg})")

        present = {key: [key in r for r in records] for key in OPTIONAL_SERIES + ("u", "cluster")}
        for key, flags in present.items():
            if any(flags) and not all(flags):
                raise DatasetFormatError(f"dimension mismatch: '{key}' present on some lines only")

        def stack(key: str, shape: Tuple[int, ...], dtype) -> np.ndarray:
            if not records:
                return np.zeros((0,) + shape, dtype=dtype)
            try:
                out = np.array([r[key] for r in records], dtype=dtype)
            except KeyError:
                raise DatasetFormatError(f"missing key '{key}'")
            except (ValueError, TypeError):
                raise DatasetFormatError(f"dimension mismatch between lines in '{key}'")
            if out.shape[1:] != shape:
                raise DatasetFormatError(
                    f"dimension mismatch in '{key}': got {out.shape[1:]}, expected {shape}"
                )
            return out

        w_raw = stack("w", (meta.T,), np.float64)
        if not np.all((w_raw == 0) | (w_raw == 1)):
            raise DatasetFormatError("non-binary treatment")

        def optional(key: str, shape: Tuple[int, ...], dtype=np.float64) -> Optional[np.ndarray]:
            if not records or not all(present[key]):
                return None
            return stack(key, shape, dtype)

        u = None
        if records and all(present["u"]):
            u = stack("u", (len(records[0]["u"]),), np.float64)

        cluster = None
        if records and all(present["cluster"]):
            cluster = np.array([r["cluster"] for r in records], dtype=np.int64)

        dataset = PanelDataset(
            x=stack("x", (meta.T, meta.d_x), np.float64),
            w=w_raw.astype(np.int8),
            y=stack("y", (meta.T,), np.float64),
            meta=meta,
            ids=np.array([r.get("id", i) for i, r in enumerate(records)], dtype=np.int64),
            y1=optional("y1", (meta.T,)),
            y0=optional("y0", (meta.T,)),
            tau=optional("tau", (meta.T,)),
            u=u,
            cluster=cluster,
        )
        PanelService.validate_dataset(dataset)
        logger.info(format_log_message("Dataset loaded", path=str(path), n=dataset.n, T=dataset.T))
        return dataset

    @staticmethod
    def split_dataset(
        d: PanelDataset,
        fractions: Sequence[float] = (0.7, 0.15, 0.15),
        seed: int = 0,
    ) -> DataSplit:
        """
        Randomly partition units into train / validation / test.

        Args:
            d: Dataset
            fractions: (f_train, f_val, f_test), positive and summing to 1
            seed: Split seed

        Returns:
            DataSplit with sorted, disjoint index arrays

        Raises:
            SplitError: Invalid fractions or too few units
        """
        if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise SplitError(f"fractions must be three positive numbers summing to 1, got {tuple(fractions)}")

        n = d.n
        n_val = int(round(fractions[1] * n))
        n_test = int(round(fractions[2] * n))
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) < 1:
            raise SplitError(f"n={n} too small to give each part at least one unit")

        perm = substream(seed, Purpose.SPLIT).permutation(n)
        split = DataSplit(
            train_idx=np.sort(perm[:n_train]),
            val_idx=np.sort(perm[n_train:n_train + n_val]),
            test_idx=np.sort(perm[n_train + n_val:]),
            seed=seed,
        )
        logger.debug(format_log_message("Dataset split", sizes=split.sizes, seed=seed))
        return split

    @staticmethod
    def make_batches(
        d: PanelDataset,
        idx: np.ndarray,
        batch_size: int,
        seed: int = 0,
        epoch: int = 0,
        shuffle: bool = True,
    ) -> List[Batch]:
        """
        Shuffle units (never timesteps) and cut them into batches.

        Args:
            d: Dataset
            idx: Unit positions to batch
            batch_size: Maximum units per batch
            seed: Shuffle seed
            epoch: Epoch number; each (seed, epoch) gives its own permutation
            shuffle: False keeps the given order (evaluation)

        Returns:
            Batches covering every unit of idx exactly once

        Raises:
            EmptySelectionError: idx is empty
            ValidationError: batch_size < 1
        """
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise EmptySelectionError("cannot batch an empty unit selection")
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")

        order = substream(seed, Purpose.BATCH, epoch).permutation(idx) if shuffle else idx
        return [
            Batch(dataset=d, idx=order[start:start + batch_size])
            for start in range(0, order.size, batch_size)
        ]
