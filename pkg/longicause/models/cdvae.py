"""
CDVAE network: inference LSTM, history representation, outcome heads and propensity head.
"""
import math
from typing import NamedTuple, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from longicause.config import settings
from longicause.core.exceptions import ConfigurationError
from longicause.schemas.model import CdvaeConfig


class PosteriorStats(NamedTuple):
    mu: torch.Tensor  # [B, z_dim]
    var: torch.Tensor  # [B, z_dim], strictly positive
    g: torch.Tensor  # [B, T, lstm_hidden]


def feed_forward(in_dim: int, out_dim: int, slope: float) -> nn.Sequential:
    """Linear -> LeakyReLU -> Linear with hidden width equal to the input width."""
    return nn.Sequential(
        nn.Linear(in_dim, in_dim),
        nn.LeakyReLU(slope),
        nn.Linear(in_dim, out_dim),
    )


def _sequence_input(x: torch.Tensor, w: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, w.unsqueeze(-1), y.unsqueeze(-1)], dim=-1)


class CdvaeNetwork(nn.Module):
    """
    Parameters of the model.

    The inference branch reads whole trajectories [x_t, w_t, y_t] and maps the
    final hidden state to a diagonal Gaussian over z. The history branch feeds
    the same inputs through a second LSTM; Phi(h_t) = FFN([d_{t-1}, x_t]) with
    d_0 = 0, so Phi(h_t) only sees responses and treatments before t.
    """

    def __init__(self, cfg: CdvaeConfig):
        super().__init__()
        if cfg.d_x is None:
            raise ConfigurationError("model.d_x must be set before building the network")
        self.cfg = cfg
        d_in = cfg.d_x + 2
        hidden = cfg.lstm_hidden
        dropout = cfg.lstm_dropout if cfg.lstm_layers > 1 else 0.0
        slope = cfg.leaky_slope

        if cfg.has_latent:
            self.inference_rnn = nn.LSTM(d_in, hidden, num_layers=cfg.lstm_layers, batch_first=True, dropout=dropout)
            self.posterior_mean = feed_forward(hidden, cfg.z_dim, slope)
            self.posterior_var = feed_forward(hidden, cfg.z_dim, slope)
        else:
            self.inference_rnn = None
            self.posterior_mean = None
            self.posterior_var = None

        self.history_rnn = nn.LSTM(d_in, hidden, num_layers=cfg.lstm_layers, batch_first=True, dropout=dropout)
        self.representation = feed_forward(hidden + cfg.d_x, cfg.phi_dim, slope)
        self.outcome_treated = feed_forward(cfg.phi_dim + cfg.z_dim, 1, slope)
        self.outcome_control = feed_forward(cfg.phi_dim + cfg.z_dim, 1, slope)
        self.propensity = feed_forward(cfg.phi_dim, 1, slope)

        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Fan-in uniform affine weights, orthogonal recurrent kernels, zero biases."""
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                nn.init.uniform_(module.weight, -bound, bound)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LSTM):
                for name, param in module.named_parameters():
                    if name.startswith("weight_ih"):
                        bound = 1.0 / math.sqrt(param.shape[1])
                        nn.init.uniform_(param, -bound, bound)
                    elif name.startswith("weight_hh"):
                        nn.init.orthogonal_(param)
                    else:
                        nn.init.zeros_(param)

    def encode(self, x: torch.Tensor, w: torch.Tensor, y: torch.Tensor) -> PosteriorStats:
        batch, steps = x.shape[0], x.shape[1]
        if self.inference_rnn is None:
            empty = x.new_zeros((batch, 0))
            return PosteriorStats(mu=empty, var=empty.clone(), g=x.new_zeros((batch, steps, 0)))

        g, _ = self.inference_rnn(_sequence_input(x, w, y))
        last = g[:, -1, :]
        mu = self.posterior_mean(last)
        var = F.softplus(self.posterior_var(last)).clamp_min(settings.VARIANCE_FLOOR)
        return PosteriorStats(mu=mu, var=var, g=g)

    def represent(self, x: torch.Tensor, w: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        d, _ = self.history_rnn(_sequence_input(x, w, y))
        d_prev = torch.cat([d.new_zeros((d.shape[0], 1, d.shape[2])), d[:, :-1, :]], dim=1)
        return self.representation(torch.cat([d_prev, x], dim=-1))

    def decode(self, phi: torch.Tensor, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z_seq = z.unsqueeze(1).expand(-1, phi.shape[1], -1)
        inputs = torch.cat([phi, z_seq], dim=-1)
        return self.outcome_treated(inputs).squeeze(-1), self.outcome_control(inputs).squeeze(-1)

    def propensity_logits(self, phi: torch.Tensor) -> torch.Tensor:
        return self.propensity(phi).squeeze(-1)
