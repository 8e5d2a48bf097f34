"""
Experiment orchestration: config files, run directories and one handler per command.
"""
import itertools
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel
from pydantic import ValidationError as PydanticValidationError

from longicause.config import settings
from longicause.core.exceptions import ConfigurationError, NumericFailureError, ValidationError
from longicause.core.logging_config import attach_run_log, detach_run_log, set_run_id
from longicause.core.logging_utils import format_log_message
from longicause.models.cdvae import CdvaeNetwork
from longicause.models.panel import DataSplit, PanelDataset
from longicause.schemas.metrics import METRIC_NAMES, MetricsReport
from longicause.schemas.model import CdvaeConfig
from longicause.schemas.run import ExperimentConfig, RunConfig
from longicause.schemas.train import TrainLog
from longicause.services.checkpoint_service import CheckpointService
from longicause.services.cdvae_service import CdvaeService
from longicause.services.gradcheck_service import GradcheckService
from longicause.services.metrics_service import MetricsService
from longicause.services.panel_service import PanelService
from longicause.services.synth_service import SynthService
from longicause.services.trainer_service import TrainerService
from longicause.services.tumor_service import TumorService

logger = logging.getLogger(__name__)

ABLATION_VARIANTS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "no_ipm": {"lambda_ipm": 0.0},
    "no_ipm_mm": {"lambda_ipm": 0.0, "lambda_mm": 0.0},
    "beta_1": {"annealing.enabled": False, "annealing.constant_beta": 1.0},
}
# (variant, reference)
ABLATION_PAIRS: List[Tuple[str, str]] = [
    ("no_ipm_mm", "full"),
    ("no_ipm", "full"),
    ("no_ipm", "no_ipm_mm"),
    ("beta_1", "full"),
]


def parse_override(text: str) -> Tuple[str, Any]:
    """`a.b=v`; v is parsed as JSON and kept as a string when that fails."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigurationError(f"override must look like key=value, got '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(data: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Set dotted keys in a nested dict (copied)."""
    data = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(f"cannot set '{dotted}': '{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return data


def _validation_detail(error: PydanticValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"])
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def load_experiment_config(path: Optional[Path], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Read a JSON config file, apply dotted overrides and validate.

    Raises:
        ConfigurationError: Unreadable file, unknown keys or invalid values
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e.msg} (line {e.lineno})")
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must contain a JSON object")

    data = apply_overrides(data, overrides or {})
    try:
        return ExperimentConfig.model_validate(data)
    except PydanticValidationError as e:
        raise ConfigurationError(f"invalid configuration: {_validation_detail(e)}")


def model_variant(cfg: CdvaeConfig, overrides: Mapping[str, Any]) -> CdvaeConfig:
    """CdvaeConfig with dotted overrides applied."""
    if not overrides:
        return cfg
    try:
        return CdvaeConfig.model_validate(apply_overrides(cfg.model_dump(), overrides))
    except PydanticValidationError as e:
        raise ConfigurationError(f"invalid model variant: {_validation_detail(e)}")


def _write_json(path: Path, payload: Any) -> None:
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


@dataclass
class RunResult:
    """Outcome of one command."""
    run_dir: Path
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


class ExperimentService:
    """Service that binds simulators, training and evaluation into commands."""

    @staticmethod
    def create_run_dir(command: str, out_root: Optional[Path] = None) -> Path:
        root = Path(out_root or settings.OUTPUT_DIR)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        run_dir = root / f"{command}-{stamp}"
        suffix = 1
        while run_dir.exists():
            run_dir = root / f"{command}-{stamp}-{suffix}"
            suffix += 1
        run_dir.mkdir(parents=True)
        return run_dir

    @staticmethod
    @contextmanager
    def run_context(run_dir: Path) -> Iterator[None]:
        """Bind the run id and a run.log handler for the duration of a command."""
        handler = attach_run_log(run_dir)
        set_run_id(run_dir.name)
        try:
            yield
        finally:
            set_run_id(None)
            detach_run_log(handler)

    @staticmethod
    def build_dataset(exp: ExperimentConfig, seed: int) -> PanelDataset:
        """Dataset for one seed according to data.source."""
        source = exp.data.source
        if source == "synth":
            return SynthService.generate_dataset(exp.synth.model_copy(update={"seed": seed}))
        if source == "tumor":
            return TumorService.generate_cohort(exp.tumor.model_copy(update={"seed": seed}))
        if exp.data.path is None:
            raise ConfigurationError("data.path is required when data.source is 'file'")
        return PanelService.load_dataset(exp.data.path.replace("{seed}", str(seed)))

    @staticmethod
    def split_for_seed(exp: ExperimentConfig, dataset: PanelDataset, seed: int) -> DataSplit:
        split_seed = seed if exp.data.split_seed is None else exp.data.split_seed
        return PanelService.split_dataset(dataset, exp.data.fractions, split_seed)

    @staticmethod
    def evaluate_model(model: CdvaeNetwork, dataset: PanelDataset, idx: np.ndarray) -> MetricsReport:
        """
        Metrics of a trained model on a unit selection.

        Raises:
            ValidationError: The dataset has no ground-truth effects
        """
        if dataset.tau is None:
            raise ValidationError("metrics need ground-truth treatment effects (tau) in the dataset")
        preds = CdvaeService.predict_dataset(model, dataset, idx)
        nrmse_cf = None
        if dataset.has_potential_outcomes:
            nrmse_cf = MetricsService.compute_counterfactual_nrmse(
                dataset.y1[idx], dataset.y0[idx], dataset.w[idx], preds["y1_hat"], preds["y0_hat"],
            )
        return MetricsService.compute_metrics(
            dataset.tau[idx], preds["tau_hat"], dataset.y[idx], preds["y_hat"], nrmse_cf=nrmse_cf,
        )

    @staticmethod
    def train_one(
        exp: ExperimentConfig,
        dataset: PanelDataset,
        split: DataSplit,
        seed: int,
        model_overrides: Optional[Mapping[str, Any]] = None,
        checkpoint_dir: Optional[Path] = None,
    ) -> Tuple[CdvaeNetwork, TrainLog]:
        model_cfg = model_variant(exp.model, model_overrides or {}).model_copy(update={"seed": seed})
        train_cfg = exp.train.model_copy(update={"seed": seed})
        return TrainerService.train_model(model_cfg, train_cfg, dataset, split, checkpoint_dir=checkpoint_dir)

    @staticmethod
    def grid_search(
        exp: ExperimentConfig,
        dataset: PanelDataset,
        split: DataSplit,
        seed: int,
    ) -> Tuple[ExperimentConfig, pd.DataFrame]:
        """
        Train every combination of the `grid` section and keep the lowest
        validation weighted-reconstruction criterion.

        Returns:
            (selected config, one row per combination)
        """
        keys = sorted(exp.grid)
        rows = []
        best: Optional[Tuple[float, ExperimentConfig]] = None
        base = exp.model_dump()
        base["grid"] = {}
        for values in itertools.product(*(exp.grid[k] for k in keys)):
            combo = dict(zip(keys, values))
            try:
                candidate = ExperimentConfig.model_validate(apply_overrides(base, combo))
            except PydanticValidationError as e:
                raise ConfigurationError(f"invalid grid combination {combo}: {_validation_detail(e)}")
            model, log = ExperimentService.train_one(candidate, dataset, split, seed)
            criterion = TrainerService.evaluate_epoch(model, dataset, split.val_idx, beta=log.final_beta)["criterion"]
            rows.append({"seed": seed, **combo, "criterion": criterion, "best_epoch": log.best_epoch})
            logger.info(format_log_message("Grid point", seed=seed, criterion=criterion, **combo))
            if best is None or criterion < best[0]:
                best = (criterion, candidate)

        table = pd.DataFrame(rows)
        table["selected"] = table["criterion"] == best[0]
        return best[1], table

    @staticmethod
    def run(run: RunConfig) -> RunResult:
        """
        Execute one command end to end inside a fresh run directory.

        The config snapshot is written before any computation.

        Raises:
            LongicauseError: Propagated with its exit code
        """
        exp = load_experiment_config(run.config_path, run.overrides)
        seeds = list(run.seeds or exp.seeds)
        run_dir = ExperimentService.create_run_dir(run.command, run.out_dir)
        _write_json(run_dir / "config.json", {
            "version": f"{settings.PROJECT_NAME} {settings.VERSION}",
            "command": run.command,
            "config_path": str(run.config_path) if run.config_path else None,
            "overrides": run.overrides,
            "seeds": seeds,
            "experiment": json.loads(exp.model_dump_json()),
        })

        handlers = {
            "generate": ExperimentService._generate,
            "tumor-sim": ExperimentService._tumor_sim,
            "train": ExperimentService._train,
            "evaluate": ExperimentService._evaluate,
            "ablate": ExperimentService._ablate,
            "sweep": ExperimentService._sweep,
            "gradcheck": ExperimentService._gradcheck,
        }
        result = RunResult(run_dir=run_dir, artifacts=[run_dir / "config.json"])
        with ExperimentService.run_context(run_dir):
            logger.info(format_log_message(f"Run '{run.command}' started", run_dir=str(run_dir), seeds=seeds))
            handlers[run.command](exp, seeds, result)
            logger.info(f"Run '{run.command}' finished; {len(result.artifacts)} artifact(s) in {run_dir}")
        return result

    @staticmethod
    def _generate(exp: ExperimentConfig, seeds: List[int], result: RunResult) -> None:
        for seed in seeds:
            path = result.run_dir / f"dataset-seed{seed}.jsonl"
            PanelService.save_dataset(SynthService.generate_dataset(exp.synth.model_copy(update={"seed": seed})), path)
            result.artifacts.append(path)

    @staticmethod
    def _tumor_sim(exp: ExperimentConfig, seeds: List[int], result: RunResult) -> None:
        for seed in seeds:
            path = result.run_dir / f"cohort-seed{seed}.jsonl"
            PanelService.save_dataset(TumorService.generate_cohort(exp.tumor.model_copy(update={"seed": seed})), path)
            result.artifacts.append(path)

    @staticmethod
    def _train(exp: ExperimentConfig, seeds: List[int], result: RunResult) -> None:
        reports = []
        for seed in seeds:
            dataset = ExperimentService.build_dataset(exp, seed)
            split = ExperimentService.split_for_seed(exp, dataset, seed)
            selected = exp
            if exp.grid:
                selected, table = ExperimentService.grid_search(exp, dataset, split, seed)
                grid_path = result.run_dir / "grid.csv"
                table.to_csv(grid_path, mode="a", header=not grid_path.exists(), index=False, lineterminator="\n")
                if grid_path not in result.artifacts:
                    result.artifacts.append(grid_path)

            model, log = ExperimentService.train_one(selected, dataset, split, seed, checkpoint_dir=result.run_dir)
            result.artifacts.append(CheckpointService.save_checkpoint(
                model, result.run_dir / f"checkpoint-seed{seed}.npz",
                meta={"seed": seed, "best_epoch": log.best_epoch, "split_sizes": list(split.sizes)},
            ))
            log_path = result.run_dir / f"trainlog-seed{seed}.json"
            _write_json(log_path, log)
            result.artifacts.append(log_path)

            if dataset.tau is None:
                logger.warning(f"Seed {seed}: dataset has no ground-truth effects; metrics skipped")
                continue
            report = ExperimentService.evaluate_model(model, dataset, split.test_idx)
            metrics_path = result.run_dir / f"metrics-seed{seed}.json"
            _write_json(metrics_path, report)
            result.artifacts.append(metrics_path)
            reports.append(report)

        if reports:
            summary = MetricsService.aggregate_reports(reports)
            _write_json(result.run_dir / "summary.json", summary)
            result.artifacts.append(result.run_dir / "summary.json")
            result.summary = summary.values()

    @staticmethod
    def _evaluate(exp: ExperimentConfig, seeds: List[int], result: RunResult) -> None:
        if exp.evaluate.checkpoint is None:
            raise ConfigurationError("evaluate.checkpoint is required (use {seed} for per-seed files)")
        reports = []
        for seed in seeds:
            dataset = ExperimentService.build_dataset(exp, seed)
            split = ExperimentService.split_for_seed(exp, dataset, seed)
            model, _ = CheckpointService.load_checkpoint(exp.evaluate.checkpoint.replace("{seed}", str(seed)))
            report = ExperimentService.evaluate_model(model, dataset, split.by_name(exp.evaluate.split))
            metrics_path = result.run_dir / f"metrics-seed{seed}.json"
            _write_json(metrics_path, report)
            result.artifacts.append(metrics_path)
            reports.append(report)

        summary = MetricsService.aggregate_reports(reports)
        _write_json(result.run_dir / "summary.json", summary)
        result.artifacts.append(result.run_dir / "summary.json")
        result.summary = summary.values()

    @staticmethod
    def _ablate(exp: ExperimentConfig, seeds: List[int], result: RunResult) -> None:
        results: Dict[str, List[MetricsReport]] = {name: [] for name in ABLATION_VARIANTS}
        for seed in seeds:
            dataset = ExperimentService.build_dataset(exp, seed)
            split = ExperimentService.split_for_seed(exp, dataset, seed)
            for name, overrides in ABLATION_VARIANTS.items():
                model, _ = ExperimentService.train_one(exp, dataset, split, seed, overrides)
                report = ExperimentService.evaluate_model(model, dataset, split.test_idx)
                results[name].append(report)
                logger.info(format_log_message("Ablation run", variant=name, seed=seed, nrmse_tau=report.nrmse_tau))

        summary_path = result.run_dir / "ablation_summary.csv"
        MetricsService.summary_table(results).to_csv(summary_path, index=False, lineterminator="\n")
        result.artifacts.append(summary_path)

        per_seed_path = result.run_dir / "ablation.json"
        _write_json(per_seed_path, {
            "seeds": seeds,
            "variants": {name: [json.loads(r.model_dump_json()) for r in reports] for name, reports in results.items()},
        })
        result.artifacts.append(per_seed_path)

        if len(seeds) < 5:
            logger.warning(f"Paired tests need at least 5 seeds, got {len(seeds)}; comparison table skipped")
            return
        comparisons_path = result.run_dir / "ablation_tests.csv"
        MetricsService.comparison_table(results, ABLATION_PAIRS).to_csv(
            comparisons_path, index=False, lineterminator="\n"
        )
        result.artifacts.append(comparisons_path)

    @staticmethod
    def _sweep(exp: ExperimentConfig, seeds: List[int], result: RunResult) -> None:
        if exp.data.source != "synth":
            raise ConfigurationError("sweep varies synth.gamma1_yx and needs data.source = 'synth'")
        if exp.sweep.metric not in METRIC_NAMES + ("nrmse_cf",):
            raise ConfigurationError(f"unknown sweep metric '{exp.sweep.metric}'")
        values: Dict[float, Dict[str, List[float]]] = {}
        for gamma in exp.sweep.gammas:
            gamma_exp = exp.model_copy(update={"synth": exp.synth.model_copy(update={"gamma1_yx": gamma})})
            values[gamma] = {name: [] for name in exp.sweep.variants}
            for seed in seeds:
                dataset = ExperimentService.build_dataset(gamma_exp, seed)
                split = ExperimentService.split_for_seed(gamma_exp, dataset, seed)
                for name, overrides in exp.sweep.variants.items():
                    model, _ = ExperimentService.train_one(gamma_exp, dataset, split, seed, overrides)
                    report = ExperimentService.evaluate_model(model, dataset, split.test_idx)
                    values[gamma][name].append(report.values()[exp.sweep.metric])
            logger.info(format_log_message("Sweep point done", gamma=gamma, **{
                name: float(np.mean(v)) for name, v in values[gamma].items()
            }))

        path = result.run_dir / "sweep.csv"
        MetricsService.gamma_sweep_report(values, path, metric=exp.sweep.metric)
        result.artifacts.append(path)

        if {"cdvae", "no_latent"} <= set(exp.sweep.variants):
            gaps = ExperimentService.latent_gaps(values)
            result.summary = {"latent_gap": {f"{gamma:g}": gap for gamma, gap in gaps.items()}}
            logger.info(format_log_message("Latent-free minus full model", metric=exp.sweep.metric, **result.summary))

    @staticmethod
    def latent_gaps(values: Mapping[float, Mapping[str, List[float]]]) -> Dict[float, float]:
        """Per gamma: mean metric of the latent-free variant minus that of the full model."""
        return {
            gamma: float(np.mean(models["no_latent"]) - np.mean(models["cdvae"]))
            for gamma, models in values.items()
        }

    @staticmethod
    def _gradcheck(exp: ExperimentConfig, seeds: List[int], result: RunResult) -> None:
        report = GradcheckService.check_gradients(exp.gradcheck, seed=seeds[0])
        path = result.run_dir / "gradcheck.json"
        _write_json(path, report)
        result.artifacts.append(path)
        result.summary = {"max_error": report.max_error, "passed": report.passed}
        if not report.passed:
            raise NumericFailureError(
                f"gradient check failed: '{report.worst_tensor}' relative error {report.max_error:.3e} "
                f">= {report.tolerance:g}"
            )
