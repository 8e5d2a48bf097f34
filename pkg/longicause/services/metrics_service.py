"""
Evaluation metrics, seed aggregation and paired significance tests.
"""
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from longicause.core.exceptions import DegenerateGroundTruthError, ValidationError
from longicause.schemas.metrics import METRIC_NAMES, MetricsReport, PairedTestResult

logger = logging.getLogger(__name__)

MIN_PAIRED_SAMPLES = 5
EXACT_WILCOXON_BELOW = 20
SIGNIFICANCE_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"))
SWEEP_COLUMNS = ["gamma", "model", "metric", "mean", "std"]


def _as_pair(truth, estimate) -> Tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if truth.shape != estimate.shape:
        raise ValidationError(f"shape mismatch: truth {truth.shape}, estimate {estimate.shape}")
    if truth.size == 0:
        raise ValidationError("cannot compute metrics on empty arrays")
    return truth, estimate


def normalized_errors(truth, estimate) -> Tuple[float, float]:
    """(NMAE, NRMSE): MAE and RMSE divided by mean |truth|."""
    truth, estimate = _as_pair(truth, estimate)
    scale = np.mean(np.abs(truth))
    if scale == 0.0:
        raise DegenerateGroundTruthError()
    diff = truth - estimate
    return float(np.mean(np.abs(diff)) / scale), float(np.sqrt(np.mean(diff ** 2)) / scale)


def significance_stars(p_t: float, p_wilcoxon: float) -> str:
    """Stars for the strictest level both tests pass."""
    for level, stars in SIGNIFICANCE_LEVELS:
        if p_t < level and p_wilcoxon < level:
            return stars
    return ""


class MetricsService:
    """Service for evaluation metrics and experiment statistics."""

    @staticmethod
    def compute_metrics(
        tau_true,
        tau_hat,
        y_true,
        y_hat,
        nrmse_cf: Optional[float] = None,
    ) -> MetricsReport:
        """
        Single-seed report.

        NRMSE(tau) = sqrt(mean((tau - tau_hat)^2)) / mean|tau|,
        NMAE(tau) = mean|tau - tau_hat| / mean|tau|,
        NAE(ATE) = |sum(tau - tau_hat)| / |sum(tau)|, PEHE = mean((tau - tau_hat)^2).
        The y metrics use y in place of tau.

        Raises:
            DegenerateGroundTruthError: A denominator is zero
            ValidationError: Shapes differ
        """
        tau_true, tau_hat = _as_pair(tau_true, tau_hat)
        nmae_tau, nrmse_tau = normalized_errors(tau_true, tau_hat)
        nmae_y, nrmse_y = normalized_errors(y_true, y_hat)

        ate_scale = abs(np.sum(tau_true))
        if ate_scale == 0.0:
            raise DegenerateGroundTruthError()
        diff = tau_true - tau_hat

        return MetricsReport(
            nae_ate=float(abs(np.sum(diff)) / ate_scale),
            nmae_tau=nmae_tau,
            nrmse_tau=nrmse_tau,
            nmae_y=nmae_y,
            nrmse_y=nrmse_y,
            pehe=float(np.mean(diff ** 2)),
            nrmse_cf=nrmse_cf,
        )

    @staticmethod
    def compute_counterfactual_nrmse(y1, y0, w, y1_hat, y0_hat, scale: float = 1.0) -> float:
        """
        RMSE of the counterfactual (unselected-arm) predictions divided by `scale`.

        Raises:
            ValidationError: Shapes differ or scale <= 0
        """
        if scale <= 0.0:
            raise ValidationError(f"scale must be positive, got {scale}")
        w = np.asarray(w)
        truth = np.where(w == 1, np.asarray(y0, dtype=np.float64), np.asarray(y1, dtype=np.float64))
        estimate = np.where(w == 1, np.asarray(y0_hat, dtype=np.float64), np.asarray(y1_hat, dtype=np.float64))
        truth, estimate = _as_pair(truth, estimate)
        return float(np.sqrt(np.mean((truth - estimate) ** 2)) / scale)

    @staticmethod
    def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
        """Mean and sample standard deviation of every metric across seeds."""
        if not reports:
            raise ValidationError("no reports to aggregate")

        names = list(METRIC_NAMES)
        if all(r.nrmse_cf is not None for r in reports):
            names.append("nrmse_cf")

        per_seed = {name: [float(getattr(r, name)) for r in reports] for name in names}
        means = {name: float(np.mean(values)) for name, values in per_seed.items()}
        std = {
            name: float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            for name, values in per_seed.items()
        }
        return MetricsReport(
            **means,
            n_seeds=len(reports),
            std=std,
            per_seed=per_seed,
        )

    @staticmethod
    def paired_tests(samples_a: Sequence[float], samples_b: Sequence[float]) -> PairedTestResult:
        """
        Two-sided paired t-test and Wilcoxon signed-rank test.

        The Wilcoxon p-value is exact below 20 pairs and uses the normal
        approximation otherwise. All-zero differences give p = 1 for both;
        a constant non-zero difference gives p_t = 0.

        Args:
            samples_a: Per-seed values of the first configuration
            samples_b: Seed-matched values of the second configuration

        Returns:
            PairedTestResult

        Raises:
            ValidationError: Length mismatch or fewer than 5 pairs
        """
        a = np.asarray(samples_a, dtype=np.float64)
        b = np.asarray(samples_b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise ValidationError(f"paired samples must be 1-d with equal length, got {a.shape} and {b.shape}")
        n = int(a.size)
        if n < MIN_PAIRED_SAMPLES:
            raise ValidationError(f"paired tests need at least {MIN_PAIRED_SAMPLES} pairs, got {n}")

        diff = b - a
        mean_difference = float(np.mean(diff))
        if np.all(diff == 0.0):
            return PairedTestResult(n=n, mean_difference=0.0, p_t=1.0, p_wilcoxon=1.0)

        if np.all(diff == diff[0]):
            p_t = 0.0
        else:
            p_t = float(stats.ttest_rel(b, a).pvalue)

        method = "exact" if n < EXACT_WILCOXON_BELOW else "approx"
        p_w = float(stats.wilcoxon(diff, method=method).pvalue)

        return PairedTestResult(
            n=n,
            mean_difference=mean_difference,
            p_t=min(max(p_t, 0.0), 1.0),
            p_wilcoxon=min(max(p_w, 0.0), 1.0),
        )

    @staticmethod
    def summary_table(results: Mapping[str, Sequence[MetricsReport]]) -> pd.DataFrame:
        """One row per configuration: mean and std of every metric."""
        rows = []
        for name, reports in results.items():
            agg = MetricsService.aggregate_reports(reports)
            row: Dict[str, Union[str, float, int]] = {"model": name, "n_seeds": agg.n_seeds}
            for metric, mean in agg.values().items():
                row[f"{metric}_mean"] = mean
                row[f"{metric}_std"] = agg.std.get(metric, 0.0)
            rows.append(row)
        return pd.DataFrame(rows)

    @staticmethod
    def comparison_table(
        results: Mapping[str, Sequence[MetricsReport]],
        pairs: Sequence[Tuple[str, str]],
        metrics: Sequence[str] = METRIC_NAMES,
    ) -> pd.DataFrame:
        """
        Paired tests for each (variant, reference) pair and metric.

        Columns: variant, reference, metric, mean_difference, p_t, p_wilcoxon, stars.
        """
        rows = []
        for variant, reference in pairs:
            for metric in metrics:
                a = [getattr(r, metric) for r in results[reference]]
                b = [getattr(r, metric) for r in results[variant]]
                test = MetricsService.paired_tests(a, b)
                rows.append({
                    "variant": variant,
                    "reference": reference,
                    "metric": metric,
                    "mean_difference": test.mean_difference,
                    "p_t": test.p_t,
                    "p_wilcoxon": test.p_wilcoxon,
                    "stars": significance_stars(test.p_t, test.p_wilcoxon),
                })
        return pd.DataFrame(rows, columns=[
            "variant", "reference", "metric", "mean_difference", "p_t", "p_wilcoxon", "stars",
        ])

    @staticmethod
    def gamma_sweep_report(
        results: Mapping[float, Mapping[str, Sequence[float]]],
        path: Optional[Union[str, Path]] = None,
        metric: str = "nrmse_tau",
    ) -> pd.DataFrame:
        """
        Tabulate a sweep over gamma1_yx.

        Args:
            results: gamma -> model name -> per-seed metric values
            path: CSV destination (header `gamma,model,metric,mean,std`)
            metric: Name written in the metric column

        Returns:
            DataFrame sorted by gamma, then model

        Raises:
            ValidationError: Fewer than two gamma values
        """
        if len(results) < 2:
            raise ValidationError("a gamma sweep report needs at least two gamma values")

        rows = []
        for gamma, models in results.items():
            for model, values in models.items():
                values = np.asarray(values, dtype=np.float64)
                rows.append({
                    "gamma": float(gamma),
                    "model": model,
                    "metric": metric,
                    "mean": float(np.mean(values)),
                    "std": float(np.std(values, ddof=1)) if values.size > 1 else 0.0,
                })
        table = (
            pd.DataFrame(rows, columns=SWEEP_COLUMNS)
            .sort_values(["gamma", "model"], kind="mergesort")
            .reset_index(drop=True)
        )

        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            table.to_csv(path, index=False, lineterminator="\n")
            logger.info(f"Sweep report written to {path} ({len(table)} rows)")
        return table
