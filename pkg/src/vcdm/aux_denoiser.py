"""The embedding prior: a transformer diffusion denoiser over semantic
embedding vectors.

The raw network consumes a short token sequence (noise-level token, optional
class token, the noisy embedding, optional augmentation token, and a learned
query) and reads its clean-embedding estimate off the query position. The
model operates in standardized embedding space; de-standardization happens
only when sampling out.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import diffusion_core
from .networks import FourierFeatures, seeded_init_


@dataclass
class AuxModelConfig:
    data_dim: int = 512            # embedding dimension being modeled
    token_dim: int = 512
    num_layers: int = 6
    num_heads: int = 8
    class_count: int | None = None
    aug_label_dim: int = 0
    ff_mult: int = 4

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


class AuxTransformer(nn.Module):
    """Raw x0-prediction network; wrap with diffusion_core.precondition."""

    def __init__(self, cfg: AuxModelConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        d = cfg.token_dim
        self.sigma_embed = FourierFeatures(d)
        self.in_proj = nn.Linear(cfg.data_dim, d)
        self.out_proj = nn.Linear(d, cfg.data_dim)
        if cfg.class_count:
            self.class_embed = nn.Embedding(cfg.class_count, d)
        if cfg.aug_label_dim:
            self.aug_proj = nn.Linear(cfg.aug_label_dim, d)
        self.query = nn.Parameter(torch.zeros(d))
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=cfg.num_heads,
            dim_feedforward=cfg.ff_mult * d,
            batch_first=True,
            norm_first=True,
            dropout=0.0,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.num_layers, enable_nested_tensor=False)
        seeded_init_(self, seed)
        with torch.no_grad():
            self.query.normal_(0.0, 0.02, generator=torch.Generator().manual_seed(seed + 1))

    def forward(self, x, c_noise, class_id=None, aug_label=None):
        cfg = self.cfg
        b = x.shape[0]
        if not torch.is_tensor(c_noise):
            c_noise = torch.as_tensor(c_noise, dtype=x.dtype)
        c_noise = c_noise.reshape(-1).to(x.dtype)
        if c_noise.shape[0] == 1 and b > 1:
            c_noise = c_noise.expand(b)
        tokens = [self.sigma_embed(c_noise)]
        if class_id is not None:
            if cfg.class_count is None:
                raise ValueError("model was built without class conditioning")
            cid = torch.as_tensor(class_id).reshape(-1)
            if cid.shape[0] == 1 and b > 1:
                cid = cid.expand(b)
            if (cid < 0).any() or (cid >= cfg.class_count).any():
                raise ValueError(f"class id out of range [0, {cfg.class_count})")
            tokens.append(self.class_embed(cid).to(x.dtype))
        tokens.append(self.in_proj(x))
        if cfg.aug_label_dim:
            if aug_label is None:
                aug_label = torch.zeros(b, cfg.aug_label_dim, dtype=x.dtype)
            aug_label = torch.as_tensor(aug_label, dtype=x.dtype)
            if aug_label.ndim == 1:
                aug_label = aug_label.unsqueeze(0).expand(b, -1)
            tokens.append(self.aug_proj(aug_label))
        tokens.append(self.query.to(x.dtype).unsqueeze(0).expand(b, -1))
        seq = torch.stack(tokens, dim=1)  # query token always last
        h = self.encoder(seq)
        return self.out_proj(h[:, -1])


class AuxPrior:
    """A trained embedding prior: the preconditioned denoiser plus the
    standardization stats it was trained under."""

    def __init__(self, denoiser, mean, std, cfg):
        self.denoiser = denoiser
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.cfg = cfg

    def standardize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def sample_embedding(self, rng, count=1, class_id=None,
                         sampler_cfg=None, schedule_cfg=None):
        """Draw embeddings conditioned on the no-augmentation label."""
        sampler_cfg = sampler_cfg or diffusion_core.SamplerConfig()
        schedule_cfg = schedule_cfg or diffusion_core.ScheduleConfig(num_steps=64)
        cond = {}
        if class_id is not None:
            cond["class_id"] = torch.full((count,), int(class_id), dtype=torch.long)
        if self.cfg.aug_label_dim:
            cond["aug_label"] = torch.zeros(count, self.cfg.aug_label_dim)
        z = diffusion_core.sample(
            self.denoiser, (count, self.cfg.data_dim), sampler_cfg, schedule_cfg,
            rng, cond=cond,
        )
        return self.destandardize(z.numpy())


def standardization_stats(embeddings):
    """Per-dimension mean/std of the training embeddings. Constant
    dimensions get std 1 so standardization stays invertible."""
    x = np.asarray(embeddings, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


def train_aux(embeddings, cfg, rng_seed, steps=2000, lr=1e-4, batch_size=64,
              ema_decay=0.999, class_ids=None, aug_labels=None,
              checkpoint_path=None, checkpoint_every=500, resume_from=None,
              lr_decay=None, config_hash=None, snapshot_steps=False,
              stop_at_step=None):
    """Fit the embedding prior with the shared denoising objective.

    Embeddings are standardized per dimension first, so sigma_data is the RMS
    of standardized data (~1). Returns (AuxPrior, loss rows).
    """
    from .training import train_loop

    x = np.asarray(embeddings, dtype=np.float64)
    mean, std = standardization_stats(x)
    z = (x - mean) / std
    sigma_data = float(np.sqrt(np.mean(z**2)))
    weighting = diffusion_core.LossWeighting(sigma_data=sigma_data)

    raw = AuxTransformer(cfg, seed=rng_seed)
    denoiser = diffusion_core.precondition(raw, sigma_data)

    data = torch.as_tensor(z, dtype=torch.float32)
    cond_data = {}
    if class_ids is not None:
        cond_data["class_id"] = torch.as_tensor(class_ids, dtype=torch.long)
    if aug_labels is not None:
        cond_data["aug_label"] = torch.as_tensor(np.asarray(aug_labels), dtype=torch.float32)

    extra = {"mean": mean, "std": std, "aux_cfg": cfg}
    state = train_loop(
        denoiser, data, weighting, steps=steps, lr=lr, batch_size=batch_size,
        ema_decay=ema_decay, seed=rng_seed, cond_data=cond_data,
        checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every,
        checkpoint_extra=extra, resume_from=resume_from, kind="aux",
        lr_decay=lr_decay, config_hash=config_hash,
        snapshot_steps=snapshot_steps, stop_at_step=stop_at_step,
    )
    return AuxPrior(state.ema_denoiser(), mean, std, cfg), state.loss_rows


def load_aux(checkpoint_path):
    from .training import load_checkpoint

    ck = load_checkpoint(checkpoint_path, kind="aux")
    cfg = ck["extra"]["aux_cfg"]
    raw = AuxTransformer(cfg, seed=0)
    denoiser = diffusion_core.precondition(raw, ck["sigma_data"])
    denoiser.load_state_dict(ck["ema_state"])
    denoiser.eval()
    return AuxPrior(denoiser, ck["extra"]["mean"], ck["extra"]["std"], cfg)
