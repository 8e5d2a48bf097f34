"""
Finite-difference check of the total-loss gradient.

Noise draws, balancing weights and transport plans are held fixed while the
parameters are perturbed; they carry no gradient in training either.
"""
import logging
from typing import Optional

import torch

from longicause.models.cdvae import CdvaeNetwork
from longicause.models.panel import BatchTensors
from longicause.schemas.model import AnnealingConfig, CdvaeConfig
from longicause.schemas.run import GradcheckConfig, GradcheckReport
from longicause.services.cdvae_service import CdvaeService, FrozenQuantities

logger = logging.getLogger(__name__)


def tiny_model_config(gc: GradcheckConfig, seed: int = 0) -> CdvaeConfig:
    """Small network with every loss term active."""
    return CdvaeConfig(
        d_x=gc.d_x,
        lstm_hidden=3,
        phi_dim=3,
        z_dim=2,
        annealing=AnnealingConfig(enabled=False, constant_beta=gc.beta),
        seed=seed,
    )


def tiny_batch(gc: GradcheckConfig, seed: int = 0) -> BatchTensors:
    """Random float64 batch with both arms present at every timestep."""
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn((gc.n_units, gc.T, gc.d_x), generator=generator, dtype=torch.float64)
    units = torch.arange(gc.n_units).unsqueeze(1)
    steps = torch.arange(gc.T).unsqueeze(0)
    w = ((units + steps) % 2).to(torch.float64)
    y = 0.5 * torch.randn((gc.n_units, gc.T), generator=generator, dtype=torch.float64)
    return BatchTensors(x=x, w=w, y=y)


class GradcheckService:
    """Service for numerical gradient verification."""

    @staticmethod
    def check_gradients(
        gc: Optional[GradcheckConfig] = None,
        model_cfg: Optional[CdvaeConfig] = None,
        seed: int = 0,
    ) -> GradcheckReport:
        """
        Compare autograd against central differences for every parameter tensor.

        The step for entry theta is gc.step * max(1, |theta|). The error of a
        tensor is ||g_analytic - g_fd||_inf / max(||g_analytic||_inf, ||g_fd||_inf, 1e-8).

        Args:
            gc: Check settings (tolerance, sizes, beta, step)
            model_cfg: Network to check; a tiny one by default
            seed: Seed for initialisation, data and noise

        Returns:
            GradcheckReport
        """
        gc = gc or GradcheckConfig()
        model_cfg = model_cfg or tiny_model_config(gc, seed)
        torch.manual_seed(seed)
        model = CdvaeNetwork(model_cfg.with_input_dim(gc.d_x)).double()
        batch = tiny_batch(gc, seed)
        generator = torch.Generator().manual_seed(seed)

        base = CdvaeService.total_loss(model, batch, beta=gc.beta, generator=generator)
        frozen: FrozenQuantities = base.frozen
        named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
        analytic = torch.autograd.grad(base.total, [p for _, p in named], allow_unused=True)

        def loss_value() -> float:
            with torch.no_grad():
                return float(CdvaeService.total_loss(model, batch, beta=gc.beta, frozen=frozen).total)

        per_tensor = {}
        n_parameters = 0
        for (name, param), grad in zip(named, analytic):
            grad = torch.zeros_like(param) if grad is None else grad
            numeric = torch.zeros_like(param)
            flat = param.data.view(-1)
            numeric_flat = numeric.view(-1)
            for k in range(flat.numel()):
                original = float(flat[k])
                h = gc.step * max(1.0, abs(original))
                flat[k] = original + h
                plus = loss_value()
                flat[k] = original - h
                minus = loss_value()
                flat[k] = original
                numeric_flat[k] = (plus - minus) / (2.0 * h)
            n_parameters += flat.numel()

            scale = max(float(grad.abs().max()), float(numeric.abs().max()), 1e-8)
            per_tensor[name] = float((grad - numeric).abs().max()) / scale

        worst = max(per_tensor, key=per_tensor.get)
        report = GradcheckReport(
            per_tensor=per_tensor,
            max_error=per_tensor[worst],
            worst_tensor=worst,
            tolerance=gc.tolerance,
            passed=per_tensor[worst] < gc.tolerance,
            n_parameters=n_parameters,
            loss=float(base.total.detach()),
        )
        level = logging.INFO if report.passed else logging.WARNING
        logger.log(level, f"Gradient check: max relative error {report.max_error:.3e} on '{worst}' "
                          f"({n_parameters} parameters, tolerance {gc.tolerance:g})")
        return report
