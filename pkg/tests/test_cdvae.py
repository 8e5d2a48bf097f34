"""
Tests for the CDVAE network, its loss terms and predictions.
"""
import math

import numpy as np
import pytest
import torch

from longicause.core.exceptions import ConfigurationError, ValidationError
from longicause.models.cdvae import CdvaeNetwork, PosteriorStats
from longicause.models.panel import BatchTensors
from longicause.schemas.model import AnnealingConfig, CdvaeConfig
from longicause.services.cdvae_service import CdvaeService


def _network(cfg: CdvaeConfig, seed: int = 0) -> CdvaeNetwork:
    torch.manual_seed(seed)
    return CdvaeNetwork(cfg).double()


class TestBetaSchedule:
    """Tests for cyclical KL annealing."""

    def test_two_step_cycles(self):
        """N = 12, M = 6: beta alternates 0, 1."""
        betas = [CdvaeService.beta_at_iteration(l, 12) for l in range(1, 7)]
        assert betas == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]

    def test_linear_rise_then_hold(self):
        """N = 60, M = 6: beta rises over the first half of each cycle and then holds at 1."""
        beta = lambda l: CdvaeService.beta_at_iteration(l, 60)
        assert beta(1) == 0.0
        assert beta(3) == pytest.approx(0.4)
        assert beta(6) == pytest.approx(1.0)
        assert beta(8) == 1.0
        assert beta(11) == 0.0

    def test_fractional_period(self):
        """N = 10, M = 3 restarts every ceil(10 / 3) = 4 iterations."""
        assert CdvaeService.beta_at_iteration(4, 10, M=3) == 1.0
        assert CdvaeService.beta_at_iteration(5, 10, M=3) == 0.0

    def test_range(self):
        """beta stays in [0, 1]."""
        betas = [CdvaeService.beta_at_iteration(l, 97, M=5, R=0.3) for l in range(1, 98)]
        assert min(betas) >= 0.0 and max(betas) <= 1.0

    def test_iteration_starts_at_one(self):
        """l = 0 is invalid."""
        with pytest.raises(ValidationError):
            CdvaeService.beta_at_iteration(0, 10)

    def test_disabled_annealing(self):
        """Disabled annealing returns the constant beta."""
        annealing = AnnealingConfig(enabled=False, constant_beta=0.25)
        assert CdvaeService.resolve_beta(annealing, 7) == 0.25

    def test_missing_iteration_count(self):
        """Annealing without n_iter cannot be resolved."""
        with pytest.raises(ValidationError):
            CdvaeService.resolve_beta(AnnealingConfig(), 1)


class TestLossTerms:
    """Tests for the individual loss terms."""

    def test_kl_zero_at_prior(self):
        """KL(N(0, I) || N(0, I)) = 0."""
        stats = PosteriorStats(mu=torch.zeros(3, 2), var=torch.ones(3, 2), g=torch.zeros(3, 1, 1))
        assert float(CdvaeService.kl_to_standard_normal(stats)) == pytest.approx(0.0)

    def test_kl_values(self):
        """Mean shift of 1 costs 1/2; variance e costs (e - 2) / 2."""
        shifted = PosteriorStats(mu=torch.tensor([[1.0, 0.0]]), var=torch.ones(1, 2), g=torch.zeros(1, 1, 1))
        wide = PosteriorStats(mu=torch.zeros(1, 1), var=torch.tensor([[math.e]]), g=torch.zeros(1, 1, 1))

        assert float(CdvaeService.kl_to_standard_normal(shifted)) == pytest.approx(0.5)
        assert float(CdvaeService.kl_to_standard_normal(wide)) == pytest.approx(0.5 * (math.e - 2.0), rel=1e-6)

    def test_kl_without_latent(self):
        """No latent, no KL."""
        stats = PosteriorStats(mu=torch.zeros(4, 0), var=torch.zeros(4, 0), g=torch.zeros(4, 3, 0))
        assert float(CdvaeService.kl_to_standard_normal(stats)) == 0.0

    def test_reconstruction_of_exact_fit(self):
        """A perfect fit leaves the Gaussian normalising constant per timestep."""
        y = torch.randn(5, 3, dtype=torch.float64)
        loss = CdvaeService.weighted_reconstruction_loss(y, y.clone(), torch.ones_like(y), sigma_y=0.1)
        assert float(loss) == pytest.approx(3 * 0.5 * math.log(2.0 * math.pi * 0.01))

    def test_reconstruction_is_weighted(self):
        """Doubling alpha doubles the loss."""
        y = torch.zeros(2, 2, dtype=torch.float64)
        prediction = torch.ones(2, 2, dtype=torch.float64)
        single = CdvaeService.weighted_reconstruction_loss(y, prediction, torch.ones_like(y), sigma_y=1.0)
        double = CdvaeService.weighted_reconstruction_loss(y, prediction, 2.0 * torch.ones_like(y), sigma_y=1.0)
        assert float(double) == pytest.approx(2.0 * float(single))

    def test_moment_matching(self):
        """Steps 0 -> 1 -> 3 cost 1 + 4."""
        g = torch.tensor([[[0.0], [1.0], [3.0]]])
        assert float(CdvaeService.moment_matching_penalty(g)) == pytest.approx(5.0)

    def test_moment_matching_constant_and_short(self):
        """Constant states or a single step give zero."""
        assert float(CdvaeService.moment_matching_penalty(torch.ones(2, 4, 3))) == 0.0
        assert float(CdvaeService.moment_matching_penalty(torch.randn(2, 1, 3))) == 0.0


class TestNetwork:
    """Tests for the network structure."""

    def test_requires_input_dimension(self):
        """d_x must be known."""
        with pytest.raises(ConfigurationError):
            CdvaeNetwork(CdvaeConfig())

    def test_representation_only_sees_the_past(self, tiny_model_cfg, tiny_batch):
        """Phi at t ignores y and w from t onwards and reacts to earlier responses."""
        model = _network(tiny_model_cfg)
        phi = model.represent(tiny_batch.x, tiny_batch.w, tiny_batch.y)

        y = tiny_batch.y.clone()
        y[:, 2] += 5.0
        w = tiny_batch.w.clone()
        w[:, 2] = 1.0 - w[:, 2]
        perturbed = model.represent(tiny_batch.x, w, y)

        torch.testing.assert_close(perturbed[:, :3], phi[:, :3], rtol=0, atol=1e-12)
        assert not torch.allclose(perturbed[:, 3], phi[:, 3])

    def test_representation_uses_current_covariates(self, tiny_model_cfg, tiny_batch):
        """x_t enters Phi at t."""
        model = _network(tiny_model_cfg)
        phi = model.represent(tiny_batch.x, tiny_batch.w, tiny_batch.y)
        x = tiny_batch.x.clone()
        x[:, 1] += 1.0
        perturbed = model.represent(x, tiny_batch.w, tiny_batch.y)

        torch.testing.assert_close(perturbed[:, 0], phi[:, 0], rtol=0, atol=1e-12)
        assert not torch.allclose(perturbed[:, 1], phi[:, 1])

    def test_posterior_variance_positive(self, tiny_model_cfg, tiny_batch):
        """Variances respect the floor."""
        stats = CdvaeService.encode_posterior(_network(tiny_model_cfg), tiny_batch)
        assert stats.mu.shape == (6, 2)
        assert bool(torch.all(stats.var >= 1e-6))

    def test_sample_latent_reparameterisation(self):
        """z = mu + sqrt(var) * eps, with supplied noise reused as given."""
        stats = PosteriorStats(
            mu=torch.tensor([[1.0, -1.0]]), var=torch.tensor([[4.0, 0.25]]), g=torch.zeros(1, 1, 1)
        )
        eps = torch.tensor([[0.5, 2.0]])
        z, used = CdvaeService.sample_latent(stats, eps=eps)

        torch.testing.assert_close(z, torch.tensor([[2.0, 0.0]]))
        assert used is eps

        first, _ = CdvaeService.sample_latent(stats, generator=torch.Generator().manual_seed(3))
        second, _ = CdvaeService.sample_latent(stats, generator=torch.Generator().manual_seed(3))
        torch.testing.assert_close(first, second, rtol=0, atol=0)

    def test_propensity_score(self, tiny_model_cfg, tiny_batch):
        """Propensities lie in (0, 1); clamping keeps them off the edges."""
        model = _network(tiny_model_cfg)
        phi = CdvaeService.represent_history(model, tiny_batch)
        e = CdvaeService.propensity_score(model, phi)
        clamped = CdvaeService.propensity_score(model, 1e3 * phi, clamp=True)

        assert e.shape == (6, 4)
        assert bool(torch.all((e > 0) & (e < 1)))
        assert bool(torch.all((clamped >= 1e-3) & (clamped <= 1 - 1e-3)))

    def test_identical_heads_give_zero_effect(self, tiny_model_cfg, tiny_batch):
        """Equal outcome heads predict tau = 0 everywhere."""
        model = _network(tiny_model_cfg)
        model.outcome_treated.load_state_dict(model.outcome_control.state_dict())

        tau_hat = CdvaeService.predict_ite(model, tiny_batch)
        torch.testing.assert_close(tau_hat, torch.zeros_like(tau_hat), rtol=0, atol=0)

    def test_swapping_outcome_heads_negates_the_effect(self, tiny_model_cfg, tiny_batch):
        """Exchanging the treated and control heads flips tau, and exchanging back restores it."""
        model = _network(tiny_model_cfg)
        tau_hat = CdvaeService.predict_ite(model, tiny_batch)

        def swap_heads():
            treated = {k: v.clone() for k, v in model.outcome_treated.state_dict().items()}
            model.outcome_treated.load_state_dict(model.outcome_control.state_dict())
            model.outcome_control.load_state_dict(treated)

        swap_heads()
        torch.testing.assert_close(CdvaeService.predict_ite(model, tiny_batch), -tau_hat, rtol=0, atol=0)
        swap_heads()
        torch.testing.assert_close(CdvaeService.predict_ite(model, tiny_batch), tau_hat, rtol=0, atol=0)


class TestTotalLoss:
    """Tests for the combined objective."""

    def test_terms_and_total(self, tiny_model_cfg, tiny_batch):
        """All terms are reported and combine into the total."""
        model = _network(tiny_model_cfg)
        out = CdvaeService.total_loss(model, tiny_batch, iteration=3, generator=torch.Generator().manual_seed(0))
        t = out.terms
        cfg = tiny_model_cfg

        assert set(t) == {"recon", "kl", "ipm", "mm", "bce", "beta", "total"}
        expected = t["recon"] + t["beta"] * t["kl"] + cfg.lambda_ipm * t["ipm"] + cfg.lambda_mm * t["mm"] + cfg.lambda_w * t["bce"]
        assert t["total"] == pytest.approx(expected)
        assert t["ipm"] > 0.0

    def test_only_reconstruction_left(self, tiny_model_cfg, tiny_batch):
        """With every coefficient at zero, total equals the reconstruction term."""
        cfg = tiny_model_cfg.model_copy(update={
            "lambda_ipm": 0.0, "lambda_mm": 0.0, "lambda_w": 0.0,
            "annealing": AnnealingConfig(enabled=False, constant_beta=0.0),
        })
        out = CdvaeService.total_loss(_network(cfg), tiny_batch, generator=torch.Generator().manual_seed(0))

        assert out.terms["total"] == pytest.approx(out.terms["recon"])
        assert out.terms["ipm"] == 0.0
        assert out.ipm is None

    def test_same_seed_same_loss(self, tiny_model_cfg, tiny_batch):
        """Loss evaluation is deterministic given the generator seed."""
        model = _network(tiny_model_cfg)
        a = CdvaeService.total_loss(model, tiny_batch, generator=torch.Generator().manual_seed(3), n_iter=20)
        b = CdvaeService.total_loss(model, tiny_batch, generator=torch.Generator().manual_seed(3), n_iter=20)
        assert a.terms == b.terms

    def test_frozen_quantities_repeat_the_loss(self, tiny_model_cfg, tiny_batch):
        """Reusing eps, alpha and plans reproduces the value exactly."""
        model = _network(tiny_model_cfg)
        first = CdvaeService.total_loss(model, tiny_batch, generator=torch.Generator().manual_seed(1))
        again = CdvaeService.total_loss(model, tiny_batch, frozen=first.frozen, generator=torch.Generator().manual_seed(9))
        assert float(again.total) == float(first.total)

    def test_without_latent(self, tiny_model_cfg, tiny_batch):
        """z_dim = 0 trains on the representation alone."""
        cfg = tiny_model_cfg.model_copy(update={"z_dim": 0})
        model = _network(cfg)
        out = CdvaeService.total_loss(model, tiny_batch)
        out.total.backward()

        assert out.terms["kl"] == 0.0 and out.terms["mm"] == 0.0
        assert model.inference_rnn is None
        assert math.isfinite(out.terms["total"])

    def test_gradients_reach_every_head(self, tiny_model_cfg, tiny_batch):
        """Backpropagation reaches the inference, outcome and propensity branches."""
        model = _network(tiny_model_cfg)
        CdvaeService.total_loss(model, tiny_batch, beta=1.0).total.backward()

        for module in (model.inference_rnn, model.outcome_treated, model.propensity):
            grads = [p.grad for p in module.parameters()]
            assert all(g is not None for g in grads)
            assert any(float(g.abs().sum()) > 0.0 for g in grads)

    def test_batch_permutation_invariance(self, tiny_model_cfg, tiny_batch):
        """Reordering the units of a batch leaves every term unchanged."""
        model = _network(tiny_model_cfg)
        order = torch.tensor([3, 0, 5, 1, 4, 2])
        shuffled = BatchTensors(x=tiny_batch.x[order], w=tiny_batch.w[order], y=tiny_batch.y[order])

        a = CdvaeService.total_loss(model, tiny_batch, beta=0.5, sample=False)
        b = CdvaeService.total_loss(model, shuffled, beta=0.5, sample=False)

        assert set(a.terms) == set(b.terms)
        for name, value in a.terms.items():
            assert b.terms[name] == pytest.approx(value, rel=1e-5, abs=1e-10)


class TestPrediction:
    """Tests for dataset predictions."""

    def test_predict_dataset(self, tiny_dataset, tiny_model_cfg):
        """Predictions cover the selection and combine into factual outputs."""
        model = _network(tiny_model_cfg)
        idx = np.arange(0, 40, 3)
        out = CdvaeService.predict_dataset(model, tiny_dataset, idx, batch_size=5)

        assert out["tau_hat"].shape == (idx.size, tiny_dataset.T)
        np.testing.assert_allclose(out["tau_hat"], out["y1_hat"] - out["y0_hat"])
        w = tiny_dataset.w[idx]
        np.testing.assert_allclose(out["y_hat"], np.where(w == 1, out["y1_hat"], out["y0_hat"]))

    def test_prediction_uses_posterior_mean(self, tiny_model_cfg, tiny_batch):
        """Repeated predictions are identical and leave the training flag untouched."""
        model = _network(tiny_model_cfg)
        model.train()
        first = CdvaeService.predict_ite(model, tiny_batch)
        second = CdvaeService.predict_ite(model, tiny_batch)

        torch.testing.assert_close(first, second, rtol=0, atol=0)
        assert model.training

    def test_potential_outcomes_decode_posterior_mean(self, tiny_model_cfg, tiny_batch):
        """predict_potential_outcomes equals decoding [Phi, mu] and picks the factual arm."""
        model = _network(tiny_model_cfg)
        y1_hat, y0_hat, y_hat = CdvaeService.predict_potential_outcomes(model, tiny_batch)

        model.eval()
        with torch.no_grad():
            stats = CdvaeService.encode_posterior(model, tiny_batch)
            phi = CdvaeService.represent_history(model, tiny_batch)
            expected_1, expected_0 = CdvaeService.decode_potential_outcomes(model, phi, stats.mu)

        assert y1_hat.shape == (6, 4)
        torch.testing.assert_close(y1_hat, expected_1)
        torch.testing.assert_close(y0_hat, expected_0)
        torch.testing.assert_close(y_hat, torch.where(tiny_batch.w == 1, y1_hat, y0_hat))

    def test_batch_tensors_dtype(self, tiny_batch):
        """Fixture batches are double precision."""
        assert isinstance(tiny_batch, BatchTensors)
        assert tiny_batch.x.dtype == torch.float64


class TestScheduleAndKlOracles:
    """Long-run checks of the beta schedule and the analytic KL."""

    def test_schedule_shape_over_full_run(self):
        """N = 12000, M = 6, R = 0.5: linear rise over each first half, then 1."""
        for l in range(1, 12001):
            delta = ((l - 1) % 2000) / 2000
            expected = 1.0 if delta > 0.5 else delta / 0.5
            assert CdvaeService.beta_at_iteration(l, 12000) == pytest.approx(expected)
        assert CdvaeService.beta_at_iteration(2001, 12000) == 0.0

    def test_kl_matches_monte_carlo(self):
        """Analytic KL agrees with a 10^5-sample estimate of E_q[log q - log p]."""
        generator = torch.Generator().manual_seed(0)
        for _ in range(5):
            mu = torch.randn((1, 3), generator=generator, dtype=torch.float64)
            var = 0.2 + torch.rand((1, 3), generator=generator, dtype=torch.float64)
            stats = PosteriorStats(mu=mu, var=var, g=torch.zeros(1, 1, 1, dtype=torch.float64))

            z = mu + var.sqrt() * torch.randn((100_000, 3), generator=generator, dtype=torch.float64)
            log_q = torch.distributions.Normal(mu, var.sqrt()).log_prob(z).sum(dim=1)
            log_p = torch.distributions.Normal(0.0, 1.0).log_prob(z).sum(dim=1)
            samples = log_q - log_p
            standard_error = float(samples.std()) / math.sqrt(samples.numel())

            analytic = float(CdvaeService.kl_to_standard_normal(stats))
            assert abs(analytic - float(samples.mean())) < 4 * standard_error
