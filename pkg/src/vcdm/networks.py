"""Small shared network components: noise-level featurization and
seed-deterministic parameter initialization."""

import math

import torch
from torch import nn


class FourierFeatures(nn.Module):
    """Sinusoidal features of the (already log-scaled) noise conditioning
    value, projected to a fixed width."""

    def __init__(self, width, num_freqs=16):
        super().__init__()
        self.register_buffer("freqs", 2.0 ** torch.arange(num_freqs).float())
        self.proj = nn.Linear(2 * num_freqs, width)

    def forward(self, c_noise):
        c = c_noise.reshape(-1, 1)
        ang = c * self.freqs
        feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)
        return self.proj(feats)


def seeded_init_(module, seed):
    """Re-initialize all Linear/Conv/Embedding parameters from an explicit
    generator so model construction never touches global RNG state."""
    g = torch.Generator()
    g.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d)):
            fan_in = m.weight.shape[1] if isinstance(m, nn.Linear) else (
                m.weight.shape[1] * m.weight.shape[2:].numel()
            )
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=g)
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=g)
        elif isinstance(m, nn.MultiheadAttention):
            with torch.no_grad():
                if m.in_proj_weight is not None:
                    bound = 1.0 / math.sqrt(m.embed_dim)
                    m.in_proj_weight.uniform_(-bound, bound, generator=g)
                    if m.in_proj_bias is not None:
                        m.in_proj_bias.zero_()
    return module
