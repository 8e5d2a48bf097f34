"""
PK-PD tumor growth under radiotherapy with diameter-confounded assignment.

V(t) = (1 + lambda log(K / V(t-1)) - (kappa_rd Rd(t) + upsilon Rd(t)^2) + e_t) V(t-1)

Chemotherapy is not modelled. Patients fall into two hidden clusters; cluster 1
has its radiosensitivity prior mean multiplied by `cluster_multiplier`.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import expit

from longicause.core.exceptions import NumericFailureError, SimulationOverflowError
from longicause.core.logging_utils import format_log_message
from longicause.core.rng import Purpose, substream
from longicause.models.panel import PanelDataset
from longicause.schemas.dataset import DatasetMeta
from longicause.schemas.tumor import LogNormalPrior, TumorConfig, sphere_volume

logger = logging.getLogger(__name__)

TUMOR_FEATURES = ("prev_volume", "mean_diameter")


def volume_from_diameter(diameter):
    """Sphere model: V = pi D^3 / 6."""
    return np.pi * np.asarray(diameter, dtype=np.float64) ** 3 / 6.0


def diameter_from_volume(volume):
    """Sphere model: D = 2 (3 V / (4 pi))^(1/3)."""
    return 2.0 * np.cbrt(3.0 * np.asarray(volume, dtype=np.float64) / (4.0 * np.pi))


def assignment_logit(cfg: TumorConfig, mean_diameter):
    """pi_t = gamma_r / D_max * (mean diameter - delta_r)."""
    return cfg.gamma_r / cfg.D_max * (np.asarray(mean_diameter, dtype=np.float64) - cfg.offset)


def _draw_lognormal(prior: LogNormalPrior, rng: np.random.Generator, mean_multiplier: float = 1.0) -> float:
    mean = prior.mean * mean_multiplier
    if prior.cv == 0.0:
        return mean
    sigma2 = math.log1p(prior.cv ** 2)
    return float(rng.lognormal(math.log(mean) - sigma2 / 2.0, math.sqrt(sigma2)))


@dataclass(frozen=True)
class PatientParams:
    lambda_g: float
    K_cap: float
    kappa_rd: float
    upsilon: float
    S: int
    V0: float

    def as_vector(self) -> List[float]:
        return [self.lambda_g, self.K_cap, self.kappa_rd, self.upsilon]


@dataclass(frozen=True)
class PatientTrajectory:
    """Arrays over days 1..T; `volume` also holds V(0) at position 0."""
    volume: np.ndarray  # [T + 1]
    mean_diameter: np.ndarray  # [T]
    w: np.ndarray  # [T]
    dose: np.ndarray  # [T]
    v1: np.ndarray  # [T]
    v0: np.ndarray  # [T]
    clip_events: int


class TumorService:
    """Service for the tumor-growth simulator."""

    @staticmethod
    def sample_patient_params(cfg: TumorConfig, patient: int, seed: Optional[int] = None) -> PatientParams:
        """
        Draw one patient's cluster label and PK-PD parameters.

        Args:
            cfg: Simulator configuration
            patient: Patient index, selects the substream
            seed: Overrides cfg.seed

        Returns:
            PatientParams with strictly positive values

        Raises:
            NumericFailureError: No valid draw within cfg.max_resample attempts
        """
        seed = cfg.seed if seed is None else seed
        rng = substream(seed, Purpose.PATIENT_PARAMS, patient)

        cluster = int(rng.integers(1, 3))
        multiplier = cfg.cluster_multiplier if cluster == 1 else 1.0
        growth_prior = cfg.lambda_prior.model_copy(update={"mean": cfg.lambda_prior.mean * cfg.growth_scale})

        for attempt in range(cfg.max_resample):
            lambda_g = _draw_lognormal(growth_prior, rng)
            capacity = _draw_lognormal(cfg.capacity, rng)
            kappa = _draw_lognormal(cfg.kappa_prior, rng, multiplier)
            diameter = rng.uniform(cfg.initial_diameter_low, cfg.initial_diameter_high)
            values = (lambda_g, capacity, kappa, sphere_volume(diameter))
            if all(math.isfinite(v) and v > 0.0 for v in values):
                if attempt:
                    logger.warning(f"Patient {patient}: prior draw resampled {attempt} time(s)")
                return PatientParams(
                    lambda_g=lambda_g,
                    K_cap=capacity,
                    kappa_rd=kappa,
                    upsilon=kappa / cfg.alpha_beta_ratio,
                    S=cluster,
                    V0=values[3],
                )

        raise NumericFailureError(f"patient {patient}: no positive prior draw after {cfg.max_resample} attempts")

    @staticmethod
    def _run_cohort(
        cfg: TumorConfig,
        params: Sequence[PatientParams],
        patients: Sequence[int],
        seed: int,
    ):
        """Vectorised recursion over patients; each patient has its own substream."""
        n, T = len(params), cfg.T_days
        uniforms = np.zeros((n, T))
        shocks = np.zeros((n, T))
        for row, patient in enumerate(patients):
            rng = substream(seed, Purpose.PATIENT_TRAJECTORY, patient)
            uniforms[row] = rng.random(T)
            shocks[row] = cfg.noise_std * rng.standard_normal(T)

        lam = np.array([p.lambda_g for p in params])
        cap = np.array([p.K_cap for p in params])
        kappa = np.array([p.kappa_rd for p in params])
        upsilon = np.array([p.upsilon for p in params])

        volume = np.zeros((n, T + 1))
        volume[:, 0] = [p.V0 for p in params]
        diameters = np.zeros((n, T + 1))
        diameters[:, 0] = diameter_from_volume(volume[:, 0])
        mean_diameter = np.zeros((n, T))
        w = np.zeros((n, T), dtype=np.int8)
        v1 = np.zeros((n, T))
        v0 = np.zeros((n, T))
        clip_events = np.zeros(n, dtype=np.int64)
        radiation = cfg.dose
        radiation_kill = kappa * radiation + upsilon * radiation ** 2

        for t in range(1, T + 1):
            span = min(cfg.window, t)
            mean_diameter[:, t - 1] = diameters[:, t - span:t].mean(axis=1)
            prob = expit(assignment_logit(cfg, mean_diameter[:, t - 1]))
            treated = uniforms[:, t - 1] < prob

            prev = volume[:, t - 1]
            growth = 1.0 + lam * np.log(cap / prev) + shocks[:, t - 1]
            branches = [growth * prev, (growth - radiation_kill) * prev]

            for arm, raw in enumerate(branches):
                if not np.all(np.isfinite(raw)):
                    bad = int(np.flatnonzero(~np.isfinite(raw))[0])
                    raise SimulationOverflowError(
                        f"patient {int(patients[bad])}: non-finite volume at day {t} "
                        f"(V(t-1)={prev[bad]!r}, lambda={lam[bad]!r}, K={cap[bad]!r})"
                    )
                clipped = np.clip(raw, cfg.min_volume, cfg.V_max)
                clip_events += (clipped != raw)
                branches[arm] = clipped

            v0[:, t - 1], v1[:, t - 1] = branches
            w[:, t - 1] = treated
            volume[:, t] = np.where(treated, v1[:, t - 1], v0[:, t - 1])
            diameters[:, t] = diameter_from_volume(volume[:, t])

        return volume, mean_diameter, w, v1, v0, clip_events

    @staticmethod
    def simulate_patient(
        cfg: TumorConfig,
        params: PatientParams,
        patient: int = 0,
        seed: Optional[int] = None,
    ) -> PatientTrajectory:
        """
        Simulate one patient, recording both potential next-day volumes.

        Args:
            cfg: Simulator configuration
            params: The patient's parameters
            patient: Patient index, selects the substream
            seed: Overrides cfg.seed

        Returns:
            PatientTrajectory

        Raises:
            SimulationOverflowError: A volume became non-finite
        """
        seed = cfg.seed if seed is None else seed
        volume, mean_diameter, w, v1, v0, clips = TumorService._run_cohort(cfg, [params], [patient], seed)
        return PatientTrajectory(
            volume=volume[0],
            mean_diameter=mean_diameter[0],
            w=w[0],
            dose=w[0] * cfg.dose,
            v1=v1[0],
            v0=v0[0],
            clip_events=int(clips[0]),
        )

    @staticmethod
    def generate_cohort(cfg: TumorConfig) -> PanelDataset:
        """
        Simulate a cohort as a panel.

        Covariates at day t are the previous volume and the windowed mean
        diameter (normalised by V_max and D_max); responses are volumes over
        V_max. The cluster label is stored but kept out of the covariates.

        Args:
            cfg: Simulator configuration

        Returns:
            PanelDataset with potential outcomes, tau, u = (lambda, K, kappa_rd, upsilon) and cluster
        """
        patients = list(range(cfg.n_patients))
        params = [TumorService.sample_patient_params(cfg, i) for i in patients]
        T = cfg.T_days

        if params:
            volume, mean_diameter, w, v1, v0, clips = TumorService._run_cohort(cfg, params, patients, cfg.seed)
        else:
            volume = np.zeros((0, T + 1))
            mean_diameter = np.zeros((0, T))
            w = np.zeros((0, T), dtype=np.int8)
            v1 = np.zeros((0, T))
            v0 = np.zeros((0, T))
            clips = np.zeros(0, dtype=np.int64)

        x = np.stack([volume[:, :-1] / cfg.V_max, mean_diameter / cfg.D_max], axis=-1)
        y1 = v1 / cfg.V_max
        y0 = v0 / cfg.V_max
        y = volume[:, 1:] / cfg.V_max

        meta = DatasetMeta(
            n=cfg.n_patients, T=T, d_x=len(TUMOR_FEATURES), d_u=4,
            generator={"name": "tumor", "features": list(TUMOR_FEATURES), **cfg.model_dump()},
            seed=cfg.seed,
            cluster_observed=False,
        )
        dataset = PanelDataset(
            x=x, w=w, y=y, meta=meta,
            y1=y1, y0=y0, tau=y1 - y0,
            u=np.array([p.as_vector() for p in params]).reshape(len(params), 4),
            cluster=np.array([p.S for p in params], dtype=np.int64),
        )

        total_clips = int(clips.sum())
        if total_clips:
            logger.warning(f"Tumor cohort: {total_clips} volume clip event(s) across {int((clips > 0).sum())} patient(s)")
        logger.info(format_log_message(
            "Tumor cohort generated",
            n=cfg.n_patients, T=T, gamma_r=cfg.gamma_r,
            treated_fraction=float(w.mean()) if w.size else 0.0,
        ))
        return dataset
