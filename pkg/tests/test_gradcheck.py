"""
Tests for the finite-difference gradient check.
"""
import pytest

from longicause.schemas.run import GradcheckConfig
from longicause.services.gradcheck_service import GradcheckService, tiny_batch, tiny_model_config


class TestGradcheckInputs:
    """Tests for the tiny problem the check runs on."""

    def test_batch_has_both_arms_everywhere(self):
        """Every timestep has treated and control units, so the IPM is active."""
        batch = tiny_batch(GradcheckConfig(), seed=0)
        assert batch.x.shape == (5, 4, 3)
        assert bool((batch.w.sum(dim=0) > 0).all()) and bool((batch.w.sum(dim=0) < 5).all())

    def test_model_config_freezes_beta(self):
        """Annealing is off and beta is the configured constant."""
        cfg = tiny_model_config(GradcheckConfig(beta=0.37))
        assert not cfg.annealing.enabled
        assert cfg.annealing.constant_beta == 0.37
        assert cfg.lambda_ipm > 0 and cfg.lambda_mm > 0 and cfg.lambda_w > 0


@pytest.mark.slow
class TestCheckGradients:
    """Tests comparing autograd with central differences."""

    def test_total_loss_gradients_match(self):
        """Every parameter tensor agrees within 1e-3 relative error."""
        report = GradcheckService.check_gradients(GradcheckConfig(), seed=0)

        assert report.passed
        assert report.max_error < 1e-3
        assert report.n_parameters > 0
        assert report.worst_tensor in report.per_tensor
        assert "propensity.0.weight" in report.per_tensor
        assert "inference_rnn.weight_hh_l0" in report.per_tensor

    def test_impossible_tolerance_fails(self):
        """A tolerance below any achievable error reports failure."""
        report = GradcheckService.check_gradients(GradcheckConfig(tolerance=1e-300, n_units=4, T=2), seed=1)
        assert not report.passed
