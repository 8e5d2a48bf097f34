"""
Parameter checkpoints.

Format `longicause-checkpoint/1`: a single .npz archive holding
- `__format__`: the format tag
- `__config__`: CdvaeConfig as JSON
- `__shapes__`: JSON map of parameter name -> shape
- `__meta__`: free-form JSON (epoch, seed, ...)
- one flat float64 array per state-dict entry, keyed by its name
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch

from longicause.core.exceptions import ValidationError
from longicause.models.cdvae import CdvaeNetwork
from longicause.schemas.model import CdvaeConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "longicause-checkpoint/1"
RESERVED_KEYS = ("__format__", "__config__", "__shapes__", "__meta__")


class CheckpointService:
    """Service for saving and restoring network parameters."""

    @staticmethod
    def save_checkpoint(
        model: CdvaeNetwork,
        path: Union[str, Path],
        meta: Optional[Dict[str, Any]] = None,
    ) -> Path:
        """
        Write the model's config and parameters to one archive.

        Args:
            model: Network
            path: Target file; `.npz` is appended when missing
            meta: Extra JSON-serialisable metadata

        Returns:
            Path actually written
        """
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_name(path.name + ".npz")
        path.parent.mkdir(parents=True, exist_ok=True)

        state = model.state_dict()
        arrays = {name: tensor.detach().cpu().double().numpy().ravel() for name, tensor in state.items()}
        shapes = {name: list(tensor.shape) for name, tensor in state.items()}
        with path.open("wb") as fh:
            np.savez(
                fh,
                __format__=np.array(CHECKPOINT_FORMAT),
                __config__=np.array(model.cfg.model_dump_json()),
                __shapes__=np.array(json.dumps(shapes)),
                __meta__=np.array(json.dumps(meta or {})),
                **arrays,
            )
        logger.debug(f"Checkpoint written to {path} ({len(arrays)} tensors)")
        return path

    @staticmethod
    def load_checkpoint(
        path: Union[str, Path],
        dtype: torch.dtype = torch.float32,
    ) -> Tuple[CdvaeNetwork, Dict[str, Any]]:
        """
        Rebuild a network from an archive.

        Args:
            path: Checkpoint file
            dtype: Parameter dtype of the rebuilt network

        Returns:
            (model, meta)

        Raises:
            ValidationError: Unknown format, missing tensors or shape mismatch
        """
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"checkpoint not found: {path}")

        with np.load(path, allow_pickle=False) as archive:
            fmt = str(archive["__format__"]) if "__format__" in archive.files else None
            if fmt != CHECKPOINT_FORMAT:
                raise ValidationError(f"unsupported checkpoint format {fmt!r} in {path}")
            cfg = CdvaeConfig.model_validate_json(str(archive["__config__"]))
            shapes = json.loads(str(archive["__shapes__"]))
            meta = json.loads(str(archive["__meta__"]))

            model = CdvaeNetwork(cfg).to(dtype)
            expected = model.state_dict()
            if set(shapes) != set(expected):
                missing = sorted(set(expected) - set(shapes))
                extra = sorted(set(shapes) - set(expected))
                raise ValidationError(f"checkpoint tensors do not match the network: missing={missing}, extra={extra}")

            state = {}
            for name, reference in expected.items():
                if list(reference.shape) != shapes[name]:
                    raise ValidationError(
                        f"shape mismatch for '{name}': checkpoint {shapes[name]}, network {list(reference.shape)}"
                    )
                state[name] = torch.as_tensor(archive[name].reshape(shapes[name]), dtype=reference.dtype)

        model.load_state_dict(state)
        logger.debug(f"Checkpoint loaded from {path}")
        return model, meta
