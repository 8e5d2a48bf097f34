"""
Tests for config loading, overrides and the experiment commands.
"""
import json
from pathlib import Path

import pandas as pd
import pytest

from longicause.config import settings
from longicause.core.exceptions import ConfigurationError
from longicause.schemas.model import CdvaeConfig
from longicause.schemas.run import ExperimentConfig, RunConfig
from longicause.services.experiment_service import (
    ABLATION_PAIRS,
    ABLATION_VARIANTS,
    ExperimentService,
    apply_overrides,
    load_experiment_config,
    model_variant,
    parse_override,
)
from longicause.services.panel_service import PanelService

TINY_OVERRIDES = {
    "synth.n": 30, "synth.T": 4, "synth.d_x": 2, "synth.d_u": 2, "synth.p": 2,
    "model.lstm_hidden": 3, "model.phi_dim": 3, "model.z_dim": 2,
    "train.max_epochs": 2, "train.batch_size": 16, "train.learning_rate": 0.01,
}
DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
DESK_SEEDS = [1, 2, 3, 4, 5]


class TestOverrides:
    """Tests for dotted key=value overrides."""

    def test_parse_json_values(self):
        """Values are JSON when possible and strings otherwise."""
        assert parse_override("train.max_epochs=5") == ("train.max_epochs", 5)
        assert parse_override("sweep.gammas=[0.1, 0.5]") == ("sweep.gammas", [0.1, 0.5])
        assert parse_override("model.weight_scheme=iptw") == ("model.weight_scheme", "iptw")
        assert parse_override("model.annealing.enabled=false") == ("model.annealing.enabled", False)

    def test_parse_requires_equals(self):
        """A bare key is not an override."""
        with pytest.raises(ConfigurationError):
            parse_override("train.max_epochs")

    def test_apply_nested(self):
        """Dotted keys create sections and leave the input untouched."""
        data = {"train": {"seed": 1}}
        out = apply_overrides(data, {"train.max_epochs": 3, "model.annealing.M": 2})

        assert out == {"train": {"seed": 1, "max_epochs": 3}, "model": {"annealing": {"M": 2}}}
        assert data == {"train": {"seed": 1}}

    def test_apply_into_scalar(self):
        """A scalar cannot hold sub-keys."""
        with pytest.raises(ConfigurationError):
            apply_overrides({"seeds": [1]}, {"seeds.first": 2})


class TestLoadExperimentConfig:
    """Tests for config files."""

    def test_defaults(self):
        """No file and no overrides give the default experiment."""
        exp = load_experiment_config(None)
        assert exp == ExperimentConfig()

    def test_file_and_overrides(self, tmp_path):
        """Overrides win over file values."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train": {"max_epochs": 9}, "seeds": [4]}))
        exp = load_experiment_config(path, {"train.max_epochs": 2})

        assert exp.train.max_epochs == 2
        assert exp.seeds == [4]

    def test_unknown_key(self):
        """Unknown keys are rejected with their location."""
        with pytest.raises(ConfigurationError) as exc:
            load_experiment_config(None, {"train.epochs": 3})
        assert "train.epochs" in exc.value.detail

    def test_invalid_json(self, tmp_path):
        """Malformed files are configuration errors."""
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_experiment_config(path)

    def test_missing_file(self, tmp_path):
        """A missing file is a configuration error."""
        with pytest.raises(ConfigurationError):
            load_experiment_config(tmp_path / "absent.json")


class TestAblationVariants:
    """Tests for the ablation definitions."""

    def test_variants_are_valid(self):
        """Every variant produces a valid network config."""
        variants = {name: model_variant(CdvaeConfig(), overrides) for name, overrides in ABLATION_VARIANTS.items()}

        assert variants["no_ipm"].lambda_ipm == 0.0 and variants["no_ipm"].lambda_mm > 0.0
        assert variants["no_ipm_mm"].lambda_mm == 0.0
        assert not variants["beta_1"].annealing.enabled
        assert variants["beta_1"].annealing.constant_beta == 1.0

    def test_pairs_reference_known_variants(self):
        """Comparison pairs only name defined variants."""
        for variant, reference in ABLATION_PAIRS:
            assert variant in ABLATION_VARIANTS and reference in ABLATION_VARIANTS

    def test_invalid_variant(self):
        """Variant overrides are validated."""
        with pytest.raises(ConfigurationError):
            model_variant(CdvaeConfig(), {"lambda_ipm": -1.0})


class TestRunDirectory:
    """Tests for run directories."""

    def test_unique_names(self, tmp_path):
        """Two runs of one command never share a directory."""
        first = ExperimentService.create_run_dir("train", tmp_path)
        second = ExperimentService.create_run_dir("train", tmp_path)

        assert first != second
        assert first.name.startswith("train-")


class TestCommands:
    """End-to-end command runs on tiny problems."""

    def test_generate(self, tmp_path):
        """generate writes one loadable panel per seed plus the config snapshot."""
        result = ExperimentService.run(RunConfig(
            command="generate", out_dir=tmp_path, seeds=[1, 2], overrides=TINY_OVERRIDES,
        ))

        snapshot = json.loads((result.run_dir / "config.json").read_text())
        assert snapshot["seeds"] == [1, 2]
        assert snapshot["version"] == f"{settings.PROJECT_NAME} {settings.VERSION}"
        assert snapshot["experiment"]["synth"]["n"] == 30
        dataset = PanelService.load_dataset(result.run_dir / "dataset-seed2.jsonl")
        assert dataset.n == 30 and dataset.meta.seed == 2
        assert (result.run_dir / "run.log").exists()

    def test_tumor_sim(self, tmp_path):
        """tumor-sim writes cohorts."""
        result = ExperimentService.run(RunConfig(
            command="tumor-sim", out_dir=tmp_path, seeds=[0],
            overrides={"tumor.n_patients": 5, "tumor.T_days": 6},
        ))
        cohort = PanelService.load_dataset(result.run_dir / "cohort-seed0.jsonl")
        assert cohort.x.shape == (5, 6, 2)

    def test_train_then_evaluate(self, tmp_path):
        """A trained checkpoint can be re-evaluated from disk."""
        trained = ExperimentService.run(RunConfig(
            command="train", out_dir=tmp_path, seeds=[1], overrides=TINY_OVERRIDES,
        ))
        for name in ("checkpoint-seed1.npz", "trainlog-seed1.json", "metrics-seed1.json", "summary.json"):
            assert (trained.run_dir / name).exists()
        assert "nrmse_tau" in trained.summary

        evaluated = ExperimentService.run(RunConfig(
            command="evaluate", out_dir=tmp_path, seeds=[1],
            overrides={**TINY_OVERRIDES, "evaluate.checkpoint": str(trained.run_dir / "checkpoint-seed{seed}.npz")},
        ))
        assert evaluated.summary["nrmse_tau"] == pytest.approx(trained.summary["nrmse_tau"], rel=1e-5)

    def test_grid_search(self, tmp_path):
        """The grid section trains each combination and marks the selected one."""
        result = ExperimentService.run(RunConfig(
            command="train", out_dir=tmp_path, seeds=[1],
            overrides={**TINY_OVERRIDES, "grid": {"model.lambda_ipm": [0.0, 0.45]}},
        ))
        table = pd.read_csv(result.run_dir / "grid.csv")

        assert len(table) == 2
        assert int(table["selected"].sum()) >= 1

    def test_evaluate_needs_checkpoint(self, tmp_path):
        """evaluate without a checkpoint path is a configuration error."""
        with pytest.raises(ConfigurationError):
            ExperimentService.run(RunConfig(command="evaluate", out_dir=tmp_path, seeds=[1], overrides=TINY_OVERRIDES))

    def test_sweep_requires_synthetic_data(self, tmp_path):
        """Sweeps vary the synthetic generator only."""
        with pytest.raises(ConfigurationError):
            ExperimentService.run(RunConfig(
                command="sweep", out_dir=tmp_path, seeds=[1], overrides={"data.source": "tumor"},
            ))

    @pytest.mark.slow
    def test_sweep(self, tmp_path):
        """A two-point sweep writes one row per gamma and model."""
        result = ExperimentService.run(RunConfig(
            command="sweep", out_dir=tmp_path, seeds=[1],
            overrides={**TINY_OVERRIDES, "sweep.gammas": [0.1, 0.9]},
        ))
        table = pd.read_csv(result.run_dir / "sweep.csv")

        assert list(table.columns) == ["gamma", "model", "metric", "mean", "std"]
        assert table["gamma"].tolist() == [0.1, 0.1, 0.9, 0.9]
        assert table["model"].tolist() == ["cdvae", "no_latent", "cdvae", "no_latent"]
        assert set(result.summary["latent_gap"]) == {"0.1", "0.9"}

    @pytest.mark.slow
    def test_ablate(self, tmp_path):
        """Five seeds give the summary and the paired comparison table."""
        result = ExperimentService.run(RunConfig(
            command="ablate", out_dir=tmp_path, seeds=[1, 2, 3, 4, 5], overrides=TINY_OVERRIDES,
        ))
        summary = pd.read_csv(result.run_dir / "ablation_summary.csv")
        tests = pd.read_csv(result.run_dir / "ablation_tests.csv")

        assert sorted(summary["model"]) == sorted(ABLATION_VARIANTS)
        assert len(tests) == len(ABLATION_PAIRS) * 6


class TestLatentGapHelper:
    """Tests for ExperimentService.latent_gaps"""

    def test_difference_of_means(self):
        """The gap is the latent-free mean minus the full-model mean per gamma."""
        values = {
            0.1: {"cdvae": [1.0, 3.0], "no_latent": [4.0, 4.0]},
            1.0: {"cdvae": [2.0, 2.0], "no_latent": [2.5, 1.5]},
        }
        gaps = ExperimentService.latent_gaps(values)

        assert gaps[0.1] == pytest.approx(2.0)
        assert gaps[1.0] == pytest.approx(0.0)


@pytest.mark.slow
class TestDeskScale:
    """End-to-end behaviour at the desk configuration (n=2000, T=20, d=20, p=4)"""

    def test_latent_helps_most_under_strong_hidden_confounding(self, tmp_path):
        """The full model beats the latent-free one on NRMSE(tau), more so at gamma 0.1 than at 1.0."""
        result = ExperimentService.run(RunConfig(
            command="sweep", config_path=DESK_CONFIG, out_dir=tmp_path, seeds=DESK_SEEDS,
            overrides={"sweep.gammas": [0.1, 1.0], "sweep.metric": "nrmse_tau"},
        ))
        gaps = result.summary["latent_gap"]
        table = pd.read_csv(result.run_dir / "sweep.csv")
        means = table.pivot(index="gamma", columns="model", values="mean")

        assert (means["cdvae"] < means["no_latent"]).all()
        assert gaps["0.1"] > gaps["1"]

    def test_selected_checkpoint_improves_and_training_stops_early(self):
        """The selected epoch is 20% below epoch one and early stopping fires in four of five seeds."""
        exp = load_experiment_config(DESK_CONFIG)
        early_stops = 0
        for seed in DESK_SEEDS:
            dataset = ExperimentService.build_dataset(exp, seed)
            split = ExperimentService.split_for_seed(exp, dataset, seed)
            _, log = ExperimentService.train_one(exp, dataset, split, seed)

            first = log.epochs[0].val["criterion"]
            selected = next(r for r in log.epochs if r.epoch == log.best_epoch).val["criterion"]
            assert selected <= 0.8 * first
            early_stops += log.stop_reason == "early_stop"

        assert early_stops >= 4
