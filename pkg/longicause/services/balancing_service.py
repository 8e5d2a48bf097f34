"""
Propensity balancing weights and the entropic Wasserstein IPM.

Transport plans are computed without gradient tracking; the distance
D = sum(T * M) carries gradients only through the cost matrix M.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import torch

from longicause.config import settings
from longicause.core.exceptions import EmptySelectionError, KernelError, PropensityRangeError, ValidationError
from longicause.core.logging_utils import format_log_message
from longicause.schemas.model import WeightScheme

logger = logging.getLogger(__name__)

WEIGHT_SCHEMES = ("iptw", "matching", "overlap")
# Plans are solved in float64 regardless of the representation dtype
OT_DTYPE = torch.float64


@dataclass(frozen=True)
class BalancingWeights:
    """Per-(unit, t) importance weights, detached from any graph."""
    alpha: torch.Tensor
    scheme: str
    normalized: bool


@dataclass(frozen=True)
class TransportPlan:
    """Entropic coupling between a treated (rows) and a control (columns) group."""
    matrix: torch.Tensor
    a: torch.Tensor
    b: torch.Tensor
    residual: float
    iterations: int
    converged: bool
    log_domain: bool = False
    potentials: Optional[Tuple[torch.Tensor, torch.Tensor]] = None


@dataclass
class IpmResult:
    """Summed per-timestep distances plus diagnostics."""
    value: torch.Tensor
    per_step: Dict[int, float] = field(default_factory=dict)
    plans: Dict[int, TransportPlan] = field(default_factory=dict)
    skipped_steps: List[int] = field(default_factory=list)
    non_converged_steps: List[int] = field(default_factory=list)


def clamp_propensity(e: torch.Tensor, clip: Optional[float] = None) -> torch.Tensor:
    """Clamp to [clip, 1 - clip]."""
    clip = settings.PROPENSITY_CLIP if clip is None else clip
    return e.clamp(clip, 1.0 - clip)


def _marginal_residual(plan: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> float:
    row = (plan.sum(dim=1) - a).abs().max()
    col = (plan.sum(dim=0) - b).abs().max()
    return float(torch.maximum(row, col))


class BalancingService:
    """Service for balancing weights and optimal-transport distances."""

    @staticmethod
    def balancing_weights(
        e: torch.Tensor,
        w: torch.Tensor,
        scheme: WeightScheme = "overlap",
        normalize: bool = True,
    ) -> BalancingWeights:
        """
        alpha = a(e) / (w e + (1 - w)(1 - e)).

        a = 1 (IPTW), min(e, 1 - e) (matching) or e (1 - e) (overlap). When
        `normalize` is set the weights are rescaled to mean 1 inside each
        (timestep, arm) group; the last axis of a 2-d input is time.

        Args:
            e: Propensities, strictly inside (0, 1); shape [B] or [B, T]
            w: Treatments with the same shape
            scheme: Weight family
            normalize: Apply group self-normalisation

        Returns:
            BalancingWeights with alpha > 0

        Raises:
            PropensityRangeError: Some e is outside (0, 1)
            ValidationError: Unknown scheme or shape mismatch
        """
        if scheme not in WEIGHT_SCHEMES:
            raise ValidationError(f"unknown weight scheme '{scheme}'")
        if e.shape != w.shape:
            raise ValidationError(f"propensity shape {tuple(e.shape)} != treatment shape {tuple(w.shape)}")

        with torch.no_grad():
            e = e.detach()
            w = w.detach().to(e.dtype)
            if not bool(torch.all((e > 0.0) & (e < 1.0))):
                raise PropensityRangeError(
                    f"propensity outside (0, 1): min={float(e.min())!r}, max={float(e.max())!r}; clamp upstream"
                )

            if scheme == "iptw":
                tilt = torch.ones_like(e)
            elif scheme == "matching":
                tilt = torch.minimum(e, 1.0 - e)
            else:
                tilt = e * (1.0 - e)
            alpha = tilt / (w * e + (1.0 - w) * (1.0 - e))

            if normalize:
                columns = alpha if alpha.dim() > 1 else alpha.unsqueeze(-1)
                arms = w if w.dim() > 1 else w.unsqueeze(-1)
                out = torch.empty_like(columns)
                for arm in (0.0, 1.0):
                    mask = (arms == arm).to(columns.dtype)
                    count = mask.sum(dim=0)
                    mean = (columns * mask).sum(dim=0) / count.clamp_min(1.0)
                    mean = torch.where(count > 0, mean, torch.ones_like(mean))
                    out = torch.where(arms == arm, columns / mean, out)
                alpha = out if alpha.dim() > 1 else out.squeeze(-1)

        return BalancingWeights(alpha=alpha, scheme=scheme, normalized=normalize)

    @staticmethod
    def sinkhorn_knopp(
        K: torch.Tensor,
        a: torch.Tensor,
        b: torch.Tensor,
        tol: Optional[float] = None,
        max_iter: Optional[int] = None,
    ) -> TransportPlan:
        """
        Alternating scaling u = a / (K v), v = b / (K^T u); T = diag(u) K diag(v).

        Args:
            K: Strictly positive kernel [n_t, n_c]
            a: Row marginal (probability vector)
            b: Column marginal (probability vector)
            tol: Marginal tolerance
            max_iter: Iteration cap

        Returns:
            TransportPlan; `converged` is False when the cap was hit

        Raises:
            KernelError: K has a zero or negative entry
        """
        tol = settings.OT_TOLERANCE if tol is None else tol
        max_iter = settings.OT_MAX_ITER if max_iter is None else max_iter

        with torch.no_grad():
            if K.numel() == 0 or not bool(torch.all(K > 0.0)):
                raise KernelError("kernel must be non-empty with strictly positive entries")

            v = torch.ones_like(b)
            plan = K
            residual = float("inf")
            iterations = 0
            for iterations in range(1, max_iter + 1):
                u = a / (K @ v)
                v = b / (K.T @ u)
                plan = u[:, None] * K * v[None, :]
                residual = _marginal_residual(plan, a, b)
                if residual <= tol:
                    break

        converged = residual <= tol
        if not converged:
            logger.debug(f"Sinkhorn stopped at max_iter={max_iter} with residual {residual:.3e}")
        return TransportPlan(matrix=plan, a=a, b=b, residual=residual, iterations=iterations, converged=converged)

    @staticmethod
    def sinkhorn_knopp_log(
        M: torch.Tensor,
        lambda_ot: float,
        a: torch.Tensor,
        b: torch.Tensor,
        tol: Optional[float] = None,
        max_iter: Optional[int] = None,
        warmstart: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
        check_every: int = 1,
    ) -> TransportPlan:
        """
        Same fixed point as `sinkhorn_knopp` with the scalings kept in log space.

        The scalings are carried as potentials f, g in cost units
        (log u = lambda f, log v = lambda g) so a solve at one sharpness can
        warm-start another.

        Args:
            M: Cost matrix [n_t, n_c]
            lambda_ot: Kernel sharpness
            a: Row marginal
            b: Column marginal
            tol: Marginal tolerance
            max_iter: Iteration cap
            warmstart: Potentials (f, g) to start from
            check_every: Evaluate the marginal residual every this many iterations

        Returns:
            TransportPlan with `log_domain` set and the final potentials
        """
        tol = settings.OT_TOLERANCE if tol is None else tol
        max_iter = settings.OT_MAX_ITER if max_iter is None else max_iter

        with torch.no_grad():
            log_k = -lambda_ot * M
            log_a, log_b = torch.log(a), torch.log(b)
            if warmstart is None:
                log_u, log_v = torch.zeros_like(a), torch.zeros_like(b)
            else:
                log_u, log_v = lambda_ot * warmstart[0], lambda_ot * warmstart[1]
            plan = torch.exp(log_k)
            residual = float("inf")
            iterations = 0
            for iterations in range(1, max_iter + 1):
                log_u = log_a - torch.logsumexp(log_k + log_v[None, :], dim=1)
                log_v = log_b - torch.logsumexp(log_k + log_u[:, None], dim=0)
                if iterations % check_every and iterations < max_iter:
                    continue
                plan = torch.exp(log_u[:, None] + log_k + log_v[None, :])
                residual = _marginal_residual(plan, a, b)
                if residual <= tol:
                    break

        converged = residual <= tol
        if not converged:
            logger.debug(f"Log-domain Sinkhorn stopped at max_iter={max_iter} with residual {residual:.3e}")
        return TransportPlan(
            matrix=plan, a=a, b=b, residual=residual, iterations=iterations,
            converged=converged, log_domain=True,
            potentials=(log_u / lambda_ot, log_v / lambda_ot),
        )

    @staticmethod
    def sinkhorn_epsilon_scaling(
        M: torch.Tensor,
        lambda_ot: float,
        a: torch.Tensor,
        b: torch.Tensor,
        tol: Optional[float] = None,
        stage_iter: Optional[int] = None,
        max_iter: Optional[int] = None,
        lambda_start: Optional[float] = None,
    ) -> TransportPlan:
        """
        Log-domain Sinkhorn with a decreasing regularisation schedule.

        The regularisation 1 / lambda decays exponentially from
        1 / lambda_start to 1 / lambda_ot; each stage runs at most `stage_iter`
        iterations warm-started from the previous potentials, and the final
        stage at lambda_ot uses what is left of `max_iter`.

        Args:
            M: Cost matrix [n_t, n_c]
            lambda_ot: Target kernel sharpness
            a: Row marginal
            b: Column marginal
            tol: Marginal tolerance of the final stage
            stage_iter: Iteration cap of each intermediate stage
            max_iter: Total iteration budget
            lambda_start: Sharpness of the first stage

        Returns:
            TransportPlan at lambda_ot; `iterations` counts every stage
        """
        tol = settings.OT_TOLERANCE if tol is None else tol
        stage_iter = settings.OT_MAX_ITER if stage_iter is None else stage_iter
        max_iter = settings.OT_FALLBACK_MAX_ITER if max_iter is None else max_iter
        lambda_start = settings.OT_LAMBDA_START if lambda_start is None else lambda_start

        reg_target = 1.0 / lambda_ot
        reg_start = max(1.0 / lambda_start, reg_target)
        potentials = None
        used = 0
        stage = 0
        while used < max_iter:
            reg = (reg_start - reg_target) * math.exp(-stage) + reg_target
            if reg <= 1.01 * reg_target:
                break
            plan = BalancingService.sinkhorn_knopp_log(
                M, 1.0 / reg, a, b, tol, min(stage_iter, max_iter - used), warmstart=potentials
            )
            potentials = plan.potentials
            used += plan.iterations
            stage += 1

        plan = BalancingService.sinkhorn_knopp_log(
            M, lambda_ot, a, b, tol, max(max_iter - used, 1), warmstart=potentials, check_every=10
        )
        return replace(plan, iterations=used + plan.iterations)

    @staticmethod
    def pairwise_distances(reps_t: torch.Tensor, reps_c: torch.Tensor) -> torch.Tensor:
        """
        Euclidean cost matrix M[i, j] = ||reps_t[i] - reps_c[j]||.

        Exactly zero for identical points, with a zero (not NaN) gradient there.
        """
        sq = (reps_t[:, None, :] - reps_c[None, :, :]).pow(2).sum(dim=-1)
        tiny = torch.finfo(sq.dtype).tiny
        return torch.where(sq > 0.0, torch.sqrt(sq.clamp_min(tiny)), torch.zeros_like(sq))

    @staticmethod
    def solve_plan(
        M: torch.Tensor,
        a: torch.Tensor,
        b: torch.Tensor,
        lambda_ot: float,
        tol: Optional[float] = None,
        max_iter: Optional[int] = None,
        fallback_max_iter: Optional[int] = None,
    ) -> TransportPlan:
        """
        Entropic plan for cost M.

        Plain scaling runs first with `max_iter`; when the kernel underflows,
        the plan turns non-finite or the marginals are still off, the problem
        is re-solved in log space with epsilon scaling under
        `fallback_max_iter`. A plan that misses the tolerance even then is
        returned with `converged` False and a warning.
        """
        tol = settings.OT_TOLERANCE if tol is None else tol
        with torch.no_grad():
            M = M.detach().to(OT_DTYPE)
            a = a.detach().to(OT_DTYPE)
            b = b.detach().to(OT_DTYPE)
            K = torch.exp(-lambda_ot * M)
            plan = None
            if bool(torch.all(K > 0.0)):
                plan = BalancingService.sinkhorn_knopp(K, a, b, tol, max_iter)
                if plan.converged and bool(torch.all(torch.isfinite(plan.matrix))):
                    return plan

            spent = 0 if plan is None else plan.iterations
            fallback = BalancingService.sinkhorn_epsilon_scaling(
                M, lambda_ot, a, b, tol, max_iter=fallback_max_iter
            )
            fallback = replace(fallback, iterations=spent + fallback.iterations)

        if not fallback.converged:
            logger.warning(format_log_message(
                "Transport plan did not converge",
                shape=tuple(M.shape), lambda_ot=lambda_ot,
                residual=fallback.residual, iterations=fallback.iterations,
            ))
        return fallback

    @staticmethod
    def weighted_wasserstein(
        reps_t: torch.Tensor,
        reps_c: torch.Tensor,
        alpha_t: torch.Tensor,
        alpha_c: torch.Tensor,
        lambda_ot: Optional[float] = None,
        tol: Optional[float] = None,
        max_iter: Optional[int] = None,
        plan: Optional[TransportPlan] = None,
    ) -> Tuple[torch.Tensor, TransportPlan]:
        """
        Weighted entropic Wasserstein distance between two groups of representations.

        Kernel K = exp(-lambda M); marginals are the group weights normalised
        to sum 1; D = sum(T * M).

        Args:
            reps_t: Treated representations [n_t, d]
            reps_c: Control representations [n_c, d]
            alpha_t: Treated weights [n_t]
            alpha_c: Control weights [n_c]
            lambda_ot: Kernel sharpness
            tol: Sinkhorn tolerance
            max_iter: Sinkhorn iteration cap
            plan: Reuse this plan instead of solving (kept constant)

        Returns:
            (D, plan); D is a scalar tensor >= 0 differentiable through M

        Raises:
            EmptySelectionError: One of the groups is empty
        """
        if reps_t.shape[0] == 0 or reps_c.shape[0] == 0:
            raise EmptySelectionError("weighted Wasserstein needs both groups non-empty")
        lambda_ot = settings.OT_LAMBDA if lambda_ot is None else lambda_ot

        M = BalancingService.pairwise_distances(reps_t, reps_c)
        if plan is None:
            a = alpha_t.detach() / alpha_t.detach().sum()
            b = alpha_c.detach() / alpha_c.detach().sum()
            plan = BalancingService.solve_plan(M, a, b, lambda_ot, tol, max_iter)
        distance = (plan.matrix.to(M.dtype) * M).sum()
        return distance, plan

    @staticmethod
    def ipm_regularizer(
        phi: torch.Tensor,
        alpha: torch.Tensor,
        w: torch.Tensor,
        lambda_ot: Optional[float] = None,
        tol: Optional[float] = None,
        max_iter: Optional[int] = None,
        frozen_plans: Optional[Dict[int, TransportPlan]] = None,
    ) -> IpmResult:
        """
        Sum over timesteps of the weighted Wasserstein distance between arms.

        Timesteps where an arm is empty contribute 0 and are listed in
        `skipped_steps`.

        Args:
            phi: Representations [B, T, d]
            alpha: Balancing weights [B, T]
            w: Treatments [B, T]
            lambda_ot: Kernel sharpness
            tol: Sinkhorn tolerance
            max_iter: Sinkhorn iteration cap
            frozen_plans: Plans to reuse per timestep

        Returns:
            IpmResult with a scalar `value` tensor
        """
        value = phi.new_zeros(())
        result = IpmResult(value=value)
        treated_mask = w.detach() > 0.5

        for t in range(phi.shape[1]):
            treated = treated_mask[:, t]
            control = ~treated
            if not bool(treated.any()) or not bool(control.any()):
                result.skipped_steps.append(t)
                continue
            frozen = None if frozen_plans is None else frozen_plans.get(t)
            distance, plan = BalancingService.weighted_wasserstein(
                phi[treated, t], phi[control, t],
                alpha[treated, t], alpha[control, t],
                lambda_ot, tol, max_iter, plan=frozen,
            )
            value = value + distance
            result.per_step[t] = float(distance.detach())
            result.plans[t] = plan
            if not plan.converged:
                result.non_converged_steps.append(t)

        if result.skipped_steps:
            logger.debug(f"IPM skipped {len(result.skipped_steps)} timestep(s) with an empty arm")
        result.value = value
        return result
