"""
CDVAE forward pass, loss terms and prediction.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from longicause.core.exceptions import EmptySelectionError, NonFiniteLossError, ValidationError
from longicause.models.cdvae import CdvaeNetwork, PosteriorStats
from longicause.models.panel import BatchTensors, PanelDataset
from longicause.schemas.model import AnnealingConfig
from longicause.services.balancing_service import BalancingService, IpmResult, TransportPlan, clamp_propensity
from longicause.services.panel_service import PanelService

logger = logging.getLogger(__name__)

LOSS_TERMS = ("recon", "kl", "ipm", "mm", "bce")


@dataclass
class FrozenQuantities:
    """Stochastic and detached inputs of one loss evaluation, reusable to repeat it exactly."""
    eps: Optional[torch.Tensor] = None
    alpha: Optional[torch.Tensor] = None
    plans: Dict[int, TransportPlan] = field(default_factory=dict)


@dataclass
class LossOutput:
    total: torch.Tensor
    terms: Dict[str, float]
    frozen: FrozenQuantities
    ipm: Optional[IpmResult] = None


class CdvaeService:
    """Service for the CDVAE objective and predictions."""

    @staticmethod
    def encode_posterior(model: CdvaeNetwork, batch: BatchTensors) -> PosteriorStats:
        """
        Run the inference network over whole trajectories.

        Args:
            model: Network
            batch: Batch tensors

        Returns:
            PosteriorStats (empty z dimension when the latent is disabled)

        Raises:
            NonFiniteLossError: Non-finite posterior parameters
        """
        stats = model.encode(batch.x, batch.w, batch.y)
        if not (torch.isfinite(stats.mu).all() and torch.isfinite(stats.var).all()):
            raise NonFiniteLossError("posterior", "non-finite posterior activations")
        return stats

    @staticmethod
    def sample_latent(
        stats: PosteriorStats,
        generator: Optional[torch.Generator] = None,
        eps: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Reparameterised draw z = mu + sqrt(var) * eps.

        Args:
            stats: Posterior statistics
            generator: Source of eps
            eps: Use this noise instead of drawing

        Returns:
            (z, eps)
        """
        if eps is None:
            eps = torch.randn(stats.mu.shape, generator=generator, dtype=stats.mu.dtype)
        return stats.mu + torch.sqrt(stats.var) * eps, eps

    @staticmethod
    def represent_history(model: CdvaeNetwork, batch: BatchTensors) -> torch.Tensor:
        """Phi(h_t) for every t, shape [B, T, phi_dim]."""
        return model.represent(batch.x, batch.w, batch.y)

    @staticmethod
    def decode_potential_outcomes(
        model: CdvaeNetwork,
        phi: torch.Tensor,
        z: torch.Tensor,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Both heads on the same [Phi, z] input; returns (y1_hat, y0_hat)."""
        return model.decode(phi, z)

    @staticmethod
    def factual(y1_hat: torch.Tensor, y0_hat: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        return w * y1_hat + (1.0 - w) * y0_hat

    @staticmethod
    def propensity_score(model: CdvaeNetwork, phi: torch.Tensor, clamp: bool = False) -> torch.Tensor:
        """Sigmoid of the propensity head; optionally clamped for weighting."""
        e = torch.sigmoid(model.propensity_logits(phi))
        return clamp_propensity(e) if clamp else e

    @staticmethod
    def kl_to_standard_normal(stats: PosteriorStats) -> torch.Tensor:
        """Batch mean of KL(N(mu, diag(var)) || N(0, I))."""
        if stats.mu.shape[-1] == 0:
            return stats.mu.new_zeros(())
        per_unit = 0.5 * (stats.mu.pow(2) + stats.var - 1.0 - torch.log(stats.var)).sum(dim=-1)
        return per_unit.mean()

    @staticmethod
    def beta_at_iteration(iteration: int, n_iter: int, M: int = 6, R: float = 0.5) -> float:
        """
        Cyclical KL weight.

        delta = ((l - 1) mod ceil(N / M)) / (N / M); beta rises linearly
        as delta / R and holds at 1 once delta > R.

        Args:
            iteration: 1-based optimiser step l
            n_iter: Planned total iterations N
            M: Number of cycles
            R: Increasing fraction of a cycle

        Returns:
            beta in [0, 1]

        Raises:
            ValidationError: Non-positive iteration or invalid schedule parameters
        """
        if iteration < 1:
            raise ValidationError(f"iteration must be >= 1, got {iteration}")
        if n_iter < 1 or M < 1 or not 0.0 < R <= 1.0:
            raise ValidationError(f"invalid schedule n_iter={n_iter}, M={M}, R={R}")
        period = n_iter / M
        cycle = math.ceil(period)
        delta = ((iteration - 1) % cycle) / period
        if delta <= R:
            return min(delta / R, 1.0)
        return 1.0

    @staticmethod
    def resolve_beta(annealing: AnnealingConfig, iteration: int, n_iter: Optional[int] = None) -> float:
        """beta for an iteration under the configured schedule."""
        if not annealing.enabled:
            return annealing.constant_beta
        total = n_iter or annealing.n_iter
        if total is None:
            raise ValidationError("annealing needs n_iter (planned optimiser iterations)")
        return CdvaeService.beta_at_iteration(iteration, total, annealing.M, annealing.R)

    @staticmethod
    def weighted_reconstruction_loss(
        y: torch.Tensor,
        prediction: torch.Tensor,
        alpha: torch.Tensor,
        sigma_y: float,
    ) -> torch.Tensor:
        """
        Sum over t of the batch mean of alpha * Gaussian negative log-likelihood.

        Args:
            y: Observed responses [B, T]
            prediction: Factual predictions [B, T]
            alpha: Detached weights [B, T]
            sigma_y: Response standard deviation

        Returns:
            Scalar tensor
        """
        nll = 0.5 * math.log(2.0 * math.pi * sigma_y ** 2) + (y - prediction).pow(2) / (2.0 * sigma_y ** 2)
        return (alpha.detach() * nll).mean(dim=0).sum()

    @staticmethod
    def moment_matching_penalty(g: torch.Tensor) -> torch.Tensor:
        """Batch mean of sum_t ||g_t - g_{t-1}||^2; zero when T < 2."""
        if g.shape[1] < 2 or g.shape[-1] == 0:
            if g.shape[1] < 2:
                logger.debug("Moment matching skipped: fewer than two timesteps")
            return g.new_zeros(())
        return (g[:, 1:, :] - g[:, :-1, :]).pow(2).sum(dim=(1, 2)).mean()

    @staticmethod
    def total_loss(
        model: CdvaeNetwork,
        batch: BatchTensors,
        iteration: int = 1,
        n_iter: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
        frozen: Optional[FrozenQuantities] = None,
        beta: Optional[float] = None,
        sample: bool = True,
    ) -> LossOutput:
        """
        recon + beta KL + lambda_ipm IPM + lambda_mm MM + lambda_w BCE.

        Args:
            model: Network
            batch: Batch tensors
            iteration: Optimiser step driving the beta schedule
            n_iter: Planned total iterations
            generator: Source of the reparameterisation noise
            frozen: Reuse noise, weights and transport plans from an earlier call
            beta: Override the schedule
            sample: False uses the posterior mean for z

        Returns:
            LossOutput with the scalar loss and the term breakdown {recon, kl, ipm, mm, bce, beta}

        Raises:
            NonFiniteLossError: A term is NaN or infinite
        """
        cfg = model.cfg
        frozen = frozen or FrozenQuantities()
        if beta is None:
            beta = CdvaeService.resolve_beta(cfg.annealing, iteration, n_iter)

        stats = CdvaeService.encode_posterior(model, batch)
        if sample:
            z, eps = CdvaeService.sample_latent(stats, generator, frozen.eps)
        else:
            z, eps = stats.mu, None

        phi = CdvaeService.represent_history(model, batch)
        y1_hat, y0_hat = CdvaeService.decode_potential_outcomes(model, phi, z)
        logits = model.propensity_logits(phi)

        alpha = frozen.alpha
        if alpha is None:
            e = clamp_propensity(torch.sigmoid(logits.detach()))
            alpha = BalancingService.balancing_weights(e, batch.w, cfg.weight_scheme).alpha

        recon = CdvaeService.weighted_reconstruction_loss(
            batch.y, CdvaeService.factual(y1_hat, y0_hat, batch.w), alpha, cfg.sigma_y
        )
        kl = CdvaeService.kl_to_standard_normal(stats)
        mm = CdvaeService.moment_matching_penalty(stats.g)
        bce = F.binary_cross_entropy_with_logits(logits, batch.w)

        ipm_result = None
        ipm = phi.new_zeros(())
        if cfg.lambda_ipm > 0.0:
            ipm_result = BalancingService.ipm_regularizer(
                phi, alpha, batch.w,
                cfg.lambda_ot, cfg.ot_tolerance, cfg.ot_max_iter,
                frozen_plans=frozen.plans or None,
            )
            ipm = ipm_result.value

        terms = {"recon": recon, "kl": kl, "ipm": ipm, "mm": mm, "bce": bce}
        for name, value in terms.items():
            if not bool(torch.isfinite(value)):
                raise NonFiniteLossError(name)

        total = recon + beta * kl + cfg.lambda_ipm * ipm + cfg.lambda_mm * mm + cfg.lambda_w * bce
        if not bool(torch.isfinite(total)):
            raise NonFiniteLossError("total")

        breakdown = {name: float(value.detach()) for name, value in terms.items()}
        breakdown["beta"] = float(beta)
        breakdown["total"] = float(total.detach())
        return LossOutput(
            total=total,
            terms=breakdown,
            frozen=FrozenQuantities(
                eps=eps,
                alpha=alpha,
                plans=dict(ipm_result.plans) if ipm_result is not None else {},
            ),
            ipm=ipm_result,
        )

    @staticmethod
    def predict_potential_outcomes(
        model: CdvaeNetwork,
        batch: BatchTensors,
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(y1_hat, y0_hat, factual y_hat) with z set to the posterior mean."""
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                stats = model.encode(batch.x, batch.w, batch.y)
                phi = model.represent(batch.x, batch.w, batch.y)
                y1_hat, y0_hat = model.decode(phi, stats.mu)
                return y1_hat, y0_hat, CdvaeService.factual(y1_hat, y0_hat, batch.w)
        finally:
            model.train(was_training)

    @staticmethod
    def predict_ite(model: CdvaeNetwork, batch: BatchTensors) -> torch.Tensor:
        """tau_hat = f1([Phi, mu]) - f0([Phi, mu]), shape [B, T]."""
        y1_hat, y0_hat, _ = CdvaeService.predict_potential_outcomes(model, batch)
        return y1_hat - y0_hat

    @staticmethod
    def predict_dataset(
        model: CdvaeNetwork,
        dataset: PanelDataset,
        idx: np.ndarray,
        batch_size: int = 512,
    ) -> Dict[str, np.ndarray]:
        """
        Predictions for the selected units.

        Returns:
            Dict with y1_hat, y0_hat, tau_hat and factual y_hat arrays [len(idx), T]

        Raises:
            EmptySelectionError: idx is empty
        """
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise EmptySelectionError("cannot predict on an empty unit selection")
        dtype = next(model.parameters()).dtype
        parts = {"y1_hat": [], "y0_hat": []}
        for batch in PanelService.make_batches(dataset, idx, batch_size, shuffle=False):
            y1_hat, y0_hat, _ = CdvaeService.predict_potential_outcomes(model, batch.to_tensors(dtype))
            parts["y1_hat"].append(y1_hat.double().numpy())
            parts["y0_hat"].append(y0_hat.double().numpy())

        y1_hat = np.concatenate(parts["y1_hat"])
        y0_hat = np.concatenate(parts["y0_hat"])
        w = dataset.w[idx].astype(np.float64)
        return {
            "y1_hat": y1_hat,
            "y0_hat": y0_hat,
            "tau_hat": y1_hat - y0_hat,
            "y_hat": w * y1_hat + (1.0 - w) * y0_hat,
        }
