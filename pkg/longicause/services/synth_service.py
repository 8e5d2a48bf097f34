"""
Autoregressive synthetic panels with confounded treatment and a static
Gaussian-mixture adjustment vector acting through X * U.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from longicause.core.exceptions import SimulationOverflowError
from longicause.core.logging_utils import format_log_message
from longicause.core.rng import Purpose, substream
from longicause.models.panel import PanelDataset
from longicause.schemas.dataset import DatasetMeta
from longicause.schemas.synth import SynthConfig

logger = logging.getLogger(__name__)

TREATMENT_COEF_STD = 0.01
TREATMENT_NOISE_STD = 0.01
OUTCOME_NOISE_STD = 0.01
MIXTURE_COMPONENTS = 3
MIXTURE_HALF_WIDTH = 10.0
MIXTURE_VARIANCE = 0.4
CHUNK_UNITS = 1024


@dataclass(frozen=True)
class CoefficientSet:
    """
    Population-level regression coefficients, shared by all units.

    Lag k (1..p) is stored at position k - 1; outcome arrays are indexed by
    the arm first (0 = control, 1 = treated).
    """
    gamma_x: np.ndarray  # [T, d_x, p]
    gamma_xw: np.ndarray  # [T, d_x, p]
    gamma_w: np.ndarray  # [T, p]
    gamma_wx: np.ndarray  # [T, p, d_x]
    gamma_wy: np.ndarray  # [T, p]
    gamma_yw: np.ndarray  # [2, T, p]
    gamma_yx: np.ndarray  # [2, T, p, d_x]
    gamma_y: np.ndarray  # [2, T, p]
    mu: np.ndarray  # [3, d_u]


@dataclass(frozen=True)
class UnitNoise:
    """Per-unit random draws, stacked over a chunk of units."""
    eps_x: np.ndarray  # [n, T, d_x]
    eps_w: np.ndarray  # [n, T]
    uniform_w: np.ndarray  # [n, T]
    eps_y: np.ndarray  # [n, T]
    u: np.ndarray  # [n, d_u]
    component: np.ndarray  # [n]


@dataclass(frozen=True)
class UnitTrajectory:
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    u: np.ndarray
    component: int


def covariate_noise_covariance(cfg: SynthConfig) -> np.ndarray:
    """Sigma_x = rho * 1 1^T + (1 - rho) * sigma2 * I."""
    d = cfg.d_x
    return cfg.rho * np.ones((d, d)) + (1.0 - cfg.rho) * cfg.sigma2 * np.eye(d)


def draw_covariate_noise(cfg: SynthConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    """
    Draw `size` vectors from N(0, Sigma_x).

    A shared factor sqrt(rho) * g plus independent sqrt((1 - rho) sigma2) * e
    has exactly the equicorrelated covariance, without a Cholesky factor.
    """
    common = rng.standard_normal((size, 1))
    own = rng.standard_normal((size, cfg.d_x))
    return np.sqrt(cfg.rho) * common + np.sqrt((1.0 - cfg.rho) * cfg.sigma2) * own


class SynthService:
    """Service for the synthetic longitudinal generator."""

    @staticmethod
    def sample_population_coefficients(cfg: SynthConfig, seed: Optional[int] = None) -> CoefficientSet:
        """
        Sample every population-level coefficient once per dataset.

        Each coefficient family draws from its own substream, so changing
        gamma1_yx only moves the treated-arm risk-factor coefficients.

        Args:
            cfg: Generator configuration
            seed: Overrides cfg.seed

        Returns:
            CoefficientSet
        """
        seed = cfg.seed if seed is None else seed
        T, p, d_x, d_u = cfg.T, cfg.p, cfg.d_x, cfg.d_u

        rng = substream(seed, Purpose.COEFF_COVARIATE)
        gamma_x = rng.standard_normal((T, d_x, p))
        gamma_xw = rng.standard_normal((T, d_x, p))

        # Means follow sin(t / pi) so the treated/control imbalance drifts over time
        rng = substream(seed, Purpose.COEFF_TREATMENT)
        trend = np.sin(np.arange(1, T + 1) / np.pi)
        gamma_w = trend[:, None] + TREATMENT_COEF_STD * rng.standard_normal((T, p))
        gamma_wy = trend[:, None] + TREATMENT_COEF_STD * rng.standard_normal((T, p))
        gamma_wx = trend[:, None, None] + TREATMENT_COEF_STD * rng.standard_normal((T, p, d_x))

        rng = substream(seed, Purpose.COEFF_OUTCOME)
        gamma_yw = np.stack([
            0.2 + 0.1 * rng.standard_normal((T, p)),
            0.5 + 0.1 * rng.standard_normal((T, p)),
        ])
        gamma_y = np.stack([
            0.5 + 0.01 * rng.standard_normal((T, p)),
            0.8 + 0.1 * rng.standard_normal((T, p)),
        ])
        gamma_yx_control = 1.0 + 0.1 * rng.standard_normal((T, p, d_x))

        rng = substream(seed, Purpose.COEFF_OUTCOME_RISK)
        gamma_yx_treated = cfg.gamma1_yx + 0.1 * rng.standard_normal((T, p, d_x))
        gamma_yx = np.stack([gamma_yx_control, gamma_yx_treated])

        rng = substream(seed, Purpose.MIXTURE_MEANS)
        mu = rng.uniform(-MIXTURE_HALF_WIDTH, MIXTURE_HALF_WIDTH, size=(MIXTURE_COMPONENTS, d_u))

        return CoefficientSet(
            gamma_x=gamma_x,
            gamma_xw=gamma_xw,
            gamma_w=gamma_w,
            gamma_wx=gamma_wx,
            gamma_wy=gamma_wy,
            gamma_yw=gamma_yw,
            gamma_yx=gamma_yx,
            gamma_y=gamma_y,
            mu=mu,
        )

    @staticmethod
    def draw_unit_noise(
        cfg: SynthConfig,
        coeffs: CoefficientSet,
        units: Sequence[int],
        seed: Optional[int] = None,
    ) -> UnitNoise:
        """Draw the random inputs of the given units, one substream per (purpose, unit)."""
        seed = cfg.seed if seed is None else seed
        eps_x, eps_w, uniform_w, eps_y, u, component = [], [], [], [], [], []
        for unit in units:
            eps_x.append(draw_covariate_noise(cfg, substream(seed, Purpose.COVARIATE_NOISE, unit), cfg.T))

            rng = substream(seed, Purpose.TREATMENT_NOISE, unit)
            eps_w.append(TREATMENT_NOISE_STD * rng.standard_normal(cfg.T))
            uniform_w.append(rng.random(cfg.T))

            rng = substream(seed, Purpose.ADJUSTMENT, unit)
            k = int(rng.integers(MIXTURE_COMPONENTS))
            component.append(k)
            u.append(coeffs.mu[k] + np.sqrt(MIXTURE_VARIANCE) * rng.standard_normal(cfg.d_u))

            eps_y.append(OUTCOME_NOISE_STD * substream(seed, Purpose.OUTCOME_NOISE, unit).standard_normal(cfg.T))

        n = len(units)
        return UnitNoise(
            eps_x=np.asarray(eps_x).reshape(n, cfg.T, cfg.d_x),
            eps_w=np.asarray(eps_w).reshape(n, cfg.T),
            uniform_w=np.asarray(uniform_w).reshape(n, cfg.T),
            eps_y=np.asarray(eps_y).reshape(n, cfg.T),
            u=np.asarray(u).reshape(n, cfg.d_u),
            component=np.asarray(component, dtype=np.int64),
        )

    @staticmethod
    def _run_recursion(cfg: SynthConfig, coeffs: CoefficientSet, noise: UnitNoise, units: Sequence[int]):
        """Vectorised recursion over a chunk of units; values before t = 1 are zero."""
        n = noise.u.shape[0]
        T, p, d_x = cfg.T, cfg.p, cfg.d_x
        x_hist = np.zeros((n, T + p, d_x))
        w_hist = np.zeros((n, T + p))
        y_hist = np.zeros((n, T + p))
        y1 = np.zeros((n, T))
        y0 = np.zeros((n, T))

        for ti in range(T):
            now = p + ti
            # Lags 1..p, lag k at position k - 1
            x_lag = x_hist[:, ti:now][:, ::-1, :]
            w_lag = w_hist[:, ti:now][:, ::-1]
            y_lag = y_hist[:, ti:now][:, ::-1]

            x_t = (
                np.einsum("nkd,dk->nd", x_lag, coeffs.gamma_x[ti]) / p
                + np.einsum("nk,dk->nd", w_lag, coeffs.gamma_xw[ti]) / p
                + noise.eps_x[:, ti]
            )

            pi_t = (
                w_lag @ coeffs.gamma_w[ti] / p
                + np.einsum("nkd,kd->n", x_lag, coeffs.gamma_wx[ti]) / (d_x * p)
                + y_lag @ coeffs.gamma_wy[ti] / p
                + noise.eps_w[:, ti]
            )
            w_t = (noise.uniform_w[:, ti] < expit(pi_t)).astype(np.float64)

            risk = x_lag * noise.u[:, None, :]
            potential = []
            for arm in (0, 1):
                potential.append(
                    w_lag @ coeffs.gamma_yw[arm, ti] / p
                    + np.einsum("nkd,kd->n", risk, coeffs.gamma_yx[arm, ti]) / (d_x * p)
                    + y_lag @ coeffs.gamma_y[arm, ti] / p
                    + noise.eps_y[:, ti]
                )
            y0[:, ti], y1[:, ti] = potential

            if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(y1[:, ti])) and np.all(np.isfinite(y0[:, ti]))):
                bad = np.flatnonzero(~(np.isfinite(x_t).all(axis=1) & np.isfinite(y1[:, ti]) & np.isfinite(y0[:, ti])))
                raise SimulationOverflowError(
                    f"synthetic trajectory overflow at t={ti + 1} for unit {int(units[bad[0]])}"
                )

            x_hist[:, now] = x_t
            w_hist[:, now] = w_t
            y_hist[:, now] = np.where(w_t == 1.0, y1[:, ti], y0[:, ti])

        return x_hist[:, p:], w_hist[:, p:], y_hist[:, p:], y1, y0

    @staticmethod
    def simulate_unit(cfg: SynthConfig, coeffs: CoefficientSet, unit: int, seed: Optional[int] = None) -> UnitTrajectory:
        """
        Simulate one unit's trajectory from its own substreams.

        Args:
            cfg: Generator configuration (same one the coefficients came from)
            coeffs: Population coefficients
            unit: Unit index, selects the random substreams
            seed: Overrides cfg.seed

        Returns:
            UnitTrajectory with observed and both potential outcomes

        Raises:
            SimulationOverflowError: Non-finite values appeared
        """
        noise = SynthService.draw_unit_noise(cfg, coeffs, [unit], seed)
        x, w, y, y1, y0 = SynthService._run_recursion(cfg, coeffs, noise, [unit])
        return UnitTrajectory(
            x=x[0], w=w[0].astype(np.int8), y=y[0], y1=y1[0], y0=y0[0],
            u=noise.u[0], component=int(noise.component[0]),
        )

    @staticmethod
    def generate_dataset(cfg: SynthConfig) -> PanelDataset:
        """
        Simulate n units under one coefficient set.

        Args:
            cfg: Generator configuration

        Returns:
            PanelDataset with potential outcomes, tau, u and the mixture component as cluster
        """
        coeffs = SynthService.sample_population_coefficients(cfg)
        T, d_x = cfg.T, cfg.d_x
        x = np.zeros((cfg.n, T, d_x))
        w = np.zeros((cfg.n, T), dtype=np.int8)
        y = np.zeros((cfg.n, T))
        y1 = np.zeros((cfg.n, T))
        y0 = np.zeros((cfg.n, T))
        u = np.zeros((cfg.n, cfg.d_u))
        cluster = np.zeros(cfg.n, dtype=np.int64)

        for start in range(0, cfg.n, CHUNK_UNITS):
            units = list(range(start, min(start + CHUNK_UNITS, cfg.n)))
            noise = SynthService.draw_unit_noise(cfg, coeffs, units)
            cx, cw, cy, cy1, cy0 = SynthService._run_recursion(cfg, coeffs, noise, units)
            sl = slice(start, start + len(units))
            x[sl], w[sl], y[sl], y1[sl], y0[sl] = cx, cw, cy, cy1, cy0
            u[sl] = noise.u
            cluster[sl] = noise.component

        meta = DatasetMeta(
            n=cfg.n, T=T, d_x=d_x, d_u=cfg.d_u,
            generator={"name": "synth", **cfg.model_dump()},
            seed=cfg.seed,
            cluster_observed=False,
        )
        dataset = PanelDataset(x=x, w=w, y=y, meta=meta, y1=y1, y0=y0, tau=y1 - y0, u=u, cluster=cluster)

        if cfg.n:
            treated = w.mean(axis=0)
            logger.info(format_log_message(
                "Synthetic panel generated",
                n=cfg.n, T=T, d_x=d_x, gamma1_yx=cfg.gamma1_yx,
                treated_min=float(treated.min()), treated_max=float(treated.max()),
            ))
        return dataset
