"""
Training loop: mini-batch AdamW with gradient clipping, cyclical beta,
early stopping on the validation total loss and optional weight averaging.
"""
import copy
import logging
import math
import time
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import torch
from torch.optim.swa_utils import SWALR, AveragedModel

from longicause.core.early_stopping import EarlyStopping
from longicause.core.exceptions import ConfigurationError, EmptySelectionError, NonFiniteLossError
from longicause.core.logging_utils import format_log_message
from longicause.models.cdvae import CdvaeNetwork
from longicause.models.panel import DataSplit, PanelDataset
from longicause.schemas.model import CdvaeConfig
from longicause.schemas.train import EpochRecord, TrainConfig, TrainLog
from longicause.services.cdvae_service import CdvaeService
from longicause.services.checkpoint_service import CheckpointService
from longicause.services.panel_service import PanelService

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 512
TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def build_model(model_cfg: CdvaeConfig, dataset: PanelDataset, dtype: torch.dtype = torch.float32) -> CdvaeNetwork:
    """Network sized for the dataset; a configured d_x must agree with it."""
    if model_cfg.d_x is not None and model_cfg.d_x != dataset.d_x:
        raise ConfigurationError(f"model.d_x={model_cfg.d_x} but the dataset has d_x={dataset.d_x}")
    return CdvaeNetwork(model_cfg.with_input_dim(dataset.d_x)).to(dtype)


class TrainerService:
    """Service for fitting and evaluating CDVAE networks."""

    @staticmethod
    def clip_gradients(parameters: Union[torch.nn.Module, Iterable[torch.Tensor]], max_norm: float) -> float:
        """
        Rescale gradients so their global L2 norm is at most max_norm.

        Returns:
            The global norm before clipping
        """
        if isinstance(parameters, torch.nn.Module):
            parameters = parameters.parameters()
        return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))

    @staticmethod
    def evaluate_epoch(
        model: CdvaeNetwork,
        dataset: PanelDataset,
        idx: np.ndarray,
        beta: float = 1.0,
        batch_size: int = EVAL_BATCH_SIZE,
    ) -> Dict[str, float]:
        """
        Loss breakdown on a unit selection, z at the posterior mean.

        Args:
            model: Network (not modified)
            dataset: Dataset
            idx: Unit positions
            beta: KL weight used in the total
            batch_size: Evaluation batch size

        Returns:
            Unit-weighted averages of each term plus `total` and `criterion`
            (the weighted reconstruction alone)

        Raises:
            EmptySelectionError: idx is empty
        """
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise EmptySelectionError("cannot evaluate on an empty unit selection")

        dtype = next(model.parameters()).dtype
        sums: Dict[str, float] = {}
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                for batch in PanelService.make_batches(dataset, idx, batch_size, shuffle=False):
                    out = CdvaeService.total_loss(model, batch.to_tensors(dtype), beta=beta, sample=False)
                    for name, value in out.terms.items():
                        sums[name] = sums.get(name, 0.0) + value * batch.size
        finally:
            model.train(was_training)

        result = {name: value / idx.size for name, value in sums.items()}
        result["beta"] = float(beta)
        result["criterion"] = result["recon"]
        return result

    @staticmethod
    def train_model(
        model_cfg: CdvaeConfig,
        train_cfg: TrainConfig,
        dataset: PanelDataset,
        split: DataSplit,
        checkpoint_dir: Optional[Union[str, Path]] = None,
    ) -> Tuple[CdvaeNetwork, TrainLog]:
        """
        Fit a network on the training units.

        Each optimiser step advances the beta schedule once. Training stops
        when the validation total loss has not improved for `patience`
        epochs; the returned parameters are those with the lowest
        validation weighted-reconstruction criterion, or the weight average
        when SWA is enabled.

        Args:
            model_cfg: Network configuration
            train_cfg: Optimisation configuration
            dataset: Dataset
            split: Unit split
            checkpoint_dir: Where to leave the last good parameters if training aborts

        Returns:
            (model, train log)

        Raises:
            NonFiniteLossError: A loss term became non-finite
            ConfigurationError: model.d_x disagrees with the dataset
        """
        start = time.perf_counter()
        torch.manual_seed(train_cfg.seed)
        dtype = TORCH_DTYPES[train_cfg.dtype]
        model = build_model(model_cfg, dataset, dtype)
        cfg = model.cfg

        batches_per_epoch = math.ceil(split.train_idx.size / train_cfg.batch_size)
        planned = batches_per_epoch * train_cfg.max_epochs
        n_iter = cfg.annealing.n_iter or planned

        optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=train_cfg.learning_rate,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=train_cfg.weight_decay,
        )
        swa_model, swa_scheduler = None, None
        swa_start = train_cfg.swa.start_epoch or max(1, train_cfg.max_epochs // 2)
        if train_cfg.swa.enabled:
            swa_model = AveragedModel(model)
            swa_scheduler = SWALR(optimizer, swa_lr=train_cfg.swa.lr, anneal_epochs=train_cfg.swa.anneal_epochs)

        generator = torch.Generator().manual_seed(train_cfg.seed)
        stopper = EarlyStopping(patience=train_cfg.patience, min_delta=train_cfg.min_delta, name="val_total")
        log = TrainLog(planned_iterations=planned)
        best_state = copy.deepcopy(model.state_dict())
        best_criterion = math.inf
        swa_updates = 0
        iteration = 0
        beta = 0.0

        logger.info(format_log_message(
            "Training started",
            n_train=split.train_idx.size, n_val=split.val_idx.size,
            batches_per_epoch=batches_per_epoch, planned_iterations=planned,
            swa=train_cfg.swa.enabled,
        ))

        for epoch in range(1, train_cfg.max_epochs + 1):
            model.train()
            sums: Dict[str, float] = {}
            non_converged = 0
            batches = PanelService.make_batches(
                dataset, split.train_idx, train_cfg.batch_size, seed=train_cfg.seed, epoch=epoch
            )
            for batch in batches:
                iteration += 1
                try:
                    out = CdvaeService.total_loss(
                        model, batch.to_tensors(dtype), iteration=iteration, n_iter=n_iter, generator=generator
                    )
                except NonFiniteLossError as e:
                    logger.error(f"Non-finite '{e.term}' at epoch {epoch}, iteration {iteration}; restoring last good parameters")
                    model.load_state_dict(best_state)
                    if checkpoint_dir is not None:
                        CheckpointService.save_checkpoint(
                            model, Path(checkpoint_dir) / "last-good.npz",
                            meta={"epoch": log.best_epoch, "aborted_at_iteration": iteration},
                        )
                    raise NonFiniteLossError(e.term, f"{e.detail} (epoch {epoch}, iteration {iteration})")

                optimizer.zero_grad()
                out.total.backward()
                TrainerService.clip_gradients(model, train_cfg.clip_norm)
                optimizer.step()
                beta = out.terms["beta"]
                if out.ipm is not None:
                    non_converged += len(out.ipm.non_converged_steps)
                for name, value in out.terms.items():
                    sums[name] = sums.get(name, 0.0) + value * batch.size

            if swa_model is not None and epoch >= swa_start:
                swa_model.update_parameters(model)
                swa_scheduler.step()
                swa_updates += 1

            train_terms = {name: value / split.train_idx.size for name, value in sums.items()}
            val_terms = TrainerService.evaluate_epoch(model, dataset, split.val_idx, beta=beta)
            log.epochs.append(EpochRecord(
                epoch=epoch, train=train_terms, val=val_terms, lr=float(optimizer.param_groups[0]["lr"]),
                ot_non_converged=non_converged,
            ))

            if non_converged:
                logger.warning(f"Epoch {epoch}: {non_converged} transport plan(s) missed the Sinkhorn tolerance")

            if val_terms["criterion"] < best_criterion:
                best_criterion = val_terms["criterion"]
                best_state = copy.deepcopy(model.state_dict())
                log.best_epoch = epoch

            logger.info(format_log_message(
                f"Epoch {epoch}",
                train_total=train_terms.get("total"), val_total=val_terms["total"],
                val_criterion=val_terms["criterion"], beta=beta,
            ))

            if stopper.update(val_terms["total"]):
                log.stop_reason = "early_stop"
                break
        else:
            log.stop_reason = "max_epochs"

        if swa_model is not None and swa_updates > 0:
            final = copy.deepcopy(swa_model.module)
            log.swa_used = True
        else:
            model.load_state_dict(best_state)
            final = model
            if swa_model is not None:
                logger.warning("SWA enabled but training stopped before the averaging phase; using best parameters")

        log.iterations = iteration
        log.final_beta = beta
        log.wall_time = time.perf_counter() - start
        logger.info(format_log_message(
            "Training finished",
            stop_reason=log.stop_reason, best_epoch=log.best_epoch, epochs=len(log.epochs),
            stopper=stopper.get_status()["state"],
            wall_time=round(log.wall_time, 2),
        ))
        return final, log
