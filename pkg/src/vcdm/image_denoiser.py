"""The conditional image model: denoiser backbones with embedding
conditioning injected through a learned linear projection added to the
noise-level embedding, plus the zero-init adapter used to make a pretrained
unconditional checkpoint conditional.

Two backbones sit behind the same raw-net interface: a small U-Net for pixel
grids and an MLP "2-D image" mode that treats each data point as a 2-vector,
which keeps distribution-level checks analytically tractable.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import diffusion_core
from .networks import FourierFeatures, seeded_init_

REGIMES = ("uncond", "y_cond", "cluster_cond")


@dataclass
class ImageModelConfig:
    mode: str = "unet"                  # "unet" or "mlp2d"
    resolution: int = 16
    channels: int = 3
    base_width: int = 32
    channel_multipliers: tuple = (1, 2, 2)
    attention_resolutions: tuple = (4,)
    y_dim: int = 0                      # 0 means no embedding conditioning
    class_count: int | None = None
    a_embed_width: int = 64
    aug_label_dim: int = 0
    regime: str = "uncond"
    emb_width: int = 128                # noise-level embedding width
    mlp_hidden: int = 128
    mlp_layers: int = 3

    def __post_init__(self):
        if self.mode not in ("unet", "mlp2d"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.mode == "unet" and self.resolution & (self.resolution - 1):
            raise ValueError("resolution must be a power of 2")
        if self.regime == "uncond" and self.y_dim:
            raise ValueError("unconditional regime takes no embedding input")

    @property
    def cond_dim(self):
        d = self.y_dim
        if self.class_count:
            d += self.a_embed_width
        d += self.aug_label_dim
        return d

    @property
    def data_shape(self):
        if self.mode == "mlp2d":
            return (2,)
        return (self.channels, self.resolution, self.resolution)


class CondProjection(nn.Module):
    """Linear map from the concatenated conditioning vector into the
    noise-embedding space. init_mode="zero" makes attachment to a pretrained
    unconditional model exactly output-preserving."""

    def __init__(self, cond_dim, emb_width, init_mode="random", seed=0):
        super().__init__()
        self.linear = nn.Linear(cond_dim, emb_width)
        self.init_mode = init_mode
        if init_mode == "zero":
            with torch.no_grad():
                self.linear.weight.zero_()
                self.linear.bias.zero_()
        elif init_mode == "random":
            seeded_init_(self.linear, seed)
        else:
            raise ValueError(f"unknown init_mode {init_mode!r}")

    def forward(self, v):
        return self.linear(v)


class _CondMixin:
    """Shared conditioning-vector assembly for both backbones."""

    def build_cond_vector(self, b, dtype, y=None, a=None, aug_label=None):
        cfg = self.cfg
        parts = []
        if cfg.y_dim:
            if y is None:
                raise ValueError("model expects an embedding input y")
            y = torch.as_tensor(y, dtype=dtype)
            if y.ndim == 1:
                y = y.unsqueeze(0).expand(b, -1)
            if y.shape[-1] != cfg.y_dim:
                raise ValueError(
                    f"conditioning dimension mismatch: got {y.shape[-1]}, "
                    f"model expects {cfg.y_dim}"
                )
            parts.append(y)
        if cfg.class_count:
            if a is None:
                raise ValueError("model expects a class label input a")
            a = torch.as_tensor(a).reshape(-1)
            if a.shape[0] == 1 and b > 1:
                a = a.expand(b)
            if (a < 0).any() or (a >= cfg.class_count).any():
                raise ValueError(f"class id out of range [0, {cfg.class_count})")
            parts.append(self.a_embed(a).to(dtype))
        if cfg.aug_label_dim:
            if aug_label is None:
                aug_label = torch.zeros(b, cfg.aug_label_dim, dtype=dtype)
            aug_label = torch.as_tensor(aug_label, dtype=dtype)
            if aug_label.ndim == 1:
                aug_label = aug_label.unsqueeze(0).expand(b, -1)
            parts.append(aug_label)
        if not parts:
            return None
        return torch.cat(parts, dim=-1)

    def noise_embedding(self, c_noise, b, dtype, y=None, a=None, aug_label=None):
        if not torch.is_tensor(c_noise):
            c_noise = torch.as_tensor(c_noise, dtype=dtype)
        c_noise = c_noise.reshape(-1).to(dtype)
        if c_noise.shape[0] == 1 and b > 1:
            c_noise = c_noise.expand(b)
        emb = self.sigma_mlp(self.sigma_embed(c_noise))
        cond = self.build_cond_vector(b, dtype, y, a, aug_label)
        if cond is not None:
            emb = emb + self.cond_proj(cond)
        return emb


class Mlp2dDenoiser(nn.Module, _CondMixin):
    """Raw network for the 2-D data mode."""

    def __init__(self, cfg: ImageModelConfig, seed=0, cond_init="random"):
        super().__init__()
        self.cfg = cfg
        w, h = cfg.emb_width, cfg.mlp_hidden
        self.sigma_embed = FourierFeatures(w)
        self.sigma_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        if cfg.class_count:
            self.a_embed = nn.Embedding(cfg.class_count, cfg.a_embed_width)
        self.in_proj = nn.Linear(2, h)
        self.emb_proj = nn.Linear(w, h)
        blocks = []
        for _ in range(cfg.mlp_layers):
            blocks.append(nn.Sequential(nn.SiLU(), nn.Linear(h, h)))
        self.blocks = nn.ModuleList(blocks)
        self.out_proj = nn.Linear(h, 2)
        seeded_init_(self, seed)
        if cfg.cond_dim:
            self.cond_proj = CondProjection(cfg.cond_dim, w, cond_init, seed + 17)

    def forward(self, x, c_noise, y=None, a=None, aug_label=None):
        b = x.shape[0]
        emb = self.noise_embedding(c_noise, b, x.dtype, y, a, aug_label)
        h = self.in_proj(x) + self.emb_proj(emb)
        for blk in self.blocks:
            h = h + blk(h)
        return self.out_proj(h)


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_width):
        super().__init__()
        groups = math.gcd(8, c_in)
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_width, c_out)
        self.norm2 = nn.GroupNorm(math.gcd(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class _SelfAttention2d(nn.Module):
    def __init__(self, channels, heads=4):
        super().__init__()
        self.norm = nn.GroupNorm(math.gcd(8, channels), channels)
        self.attn = nn.MultiheadAttention(channels, math.gcd(heads, channels), batch_first=True)

    def forward(self, x):
        b, c, hh, ww = x.shape
        h = self.norm(x).reshape(b, c, hh * ww).transpose(1, 2)
        out, _ = self.attn(h, h, h, need_weights=False)
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


class UNetDenoiser(nn.Module, _CondMixin):
    """Small U-Net raw network for pixel grids up to 64x64."""

    def __init__(self, cfg: ImageModelConfig, seed=0, cond_init="random"):
        super().__init__()
        self.cfg = cfg
        w = cfg.emb_width
        self.sigma_embed = FourierFeatures(w)
        self.sigma_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        if cfg.class_count:
            self.a_embed = nn.Embedding(cfg.class_count, cfg.a_embed_width)
        widths = [cfg.base_width * m for m in cfg.channel_multipliers]
        self.in_conv = nn.Conv2d(cfg.channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        res = cfg.resolution
        for i, cw in enumerate(widths):
            prev = widths[i - 1] if i else widths[0]
            self.down_blocks.append(_ResBlock(prev, cw, w))
            self.down_attn.append(
                _SelfAttention2d(cw) if res in cfg.attention_resolutions else nn.Identity()
            )
            if i < len(widths) - 1:
                res //= 2
        self.mid = _ResBlock(widths[-1], widths[-1], w)
        self.mid_attn = (
            _SelfAttention2d(widths[-1])
            if res in cfg.attention_resolutions
            else nn.Identity()
        )
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(widths))):
            skip_w = widths[i]
            out_w = widths[i - 1] if i else widths[0]
            self.up_blocks.append(_ResBlock(widths[i] + skip_w, out_w, w))
        self.out_norm = nn.GroupNorm(math.gcd(8, widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], cfg.channels, 3, padding=1)
        seeded_init_(self, seed)
        with torch.no_grad():
            self.out_conv.weight.zero_()
            self.out_conv.bias.zero_()
        if cfg.cond_dim:
            self.cond_proj = CondProjection(cfg.cond_dim, w, cond_init, seed + 17)

    def forward(self, x, c_noise, y=None, a=None, aug_label=None):
        emb = self.noise_embedding(c_noise, x.shape[0], x.dtype, y, a, aug_label)
        h = self.in_conv(x)
        skips = []
        for i, (blk, attn) in enumerate(zip(self.down_blocks, self.down_attn)):
            h = attn(blk(h, emb))
            skips.append(h)
            if i < len(self.down_blocks) - 1:
                h = torch.nn.functional.avg_pool2d(h, 2)
        h = self.mid_attn(self.mid(h, emb))
        for i, blk in enumerate(self.up_blocks):
            skip = skips[len(skips) - 1 - i]
            if h.shape[-1] != skip.shape[-1]:
                h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = blk(torch.cat([h, skip], dim=1), emb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


def build_raw_net(cfg, seed=0, cond_init="random"):
    cls = Mlp2dDenoiser if cfg.mode == "mlp2d" else UNetDenoiser
    return cls(cfg, seed=seed, cond_init=cond_init)


class IncompatibleCheckpointError(RuntimeError):
    pass


def attach_zero_init_conditioning(base_denoiser, base_cfg, y_dim):
    """Turn a trained unconditional denoiser into a conditional one whose
    function at initialization is exactly the unconditional function for any
    y (the new projection weights are zero)."""
    if base_cfg.y_dim:
        raise IncompatibleCheckpointError("base checkpoint is already conditional")
    new_cfg = replace(base_cfg, y_dim=y_dim, regime="y_cond")
    new_raw = build_raw_net(new_cfg, seed=0, cond_init="zero")
    base_state = base_denoiser.raw_net.state_dict()
    missing, unexpected = new_raw.load_state_dict(base_state, strict=False)
    if unexpected:
        raise IncompatibleCheckpointError(f"unexpected keys {unexpected}")
    if any(not k.startswith("cond_proj.") for k in missing):
        raise IncompatibleCheckpointError(f"architecture mismatch, missing {missing}")
    return diffusion_core.precondition(new_raw, base_denoiser.sigma_data), new_cfg


def train_image_model(images, cfg, rng_seed, steps=2000, lr=1e-4, batch_size=64,
                      ema_decay=0.999, embeddings=None, class_ids=None,
                      aug_labels=None, sigma_data=None, checkpoint_path=None,
                      checkpoint_every=500, resume_from=None, raw_net=None,
                      snapshot_steps=False, stop_at_step=None, config_hash=None,
                      lr_decay=None):
    """Train the image denoiser in one of three regimes: unconditional,
    embedding-conditional, or cluster-id-conditional (the cluster id arrives
    as a one-hot in the y slot). Returns (denoiser, ema denoiser, loss rows).
    """
    from .training import train_loop

    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if sigma_data is None:
        sigma_data = float(x.double().std())
    weighting = diffusion_core.LossWeighting(sigma_data=sigma_data)
    if raw_net is None:
        raw_net = build_raw_net(cfg, seed=rng_seed)
    denoiser = diffusion_core.precondition(raw_net, sigma_data)

    cond_data = {}
    if cfg.regime in ("y_cond", "cluster_cond"):
        if embeddings is None:
            raise ValueError(f"regime {cfg.regime} requires embeddings")
        cond_data["y"] = torch.as_tensor(np.asarray(embeddings), dtype=torch.float32)
    if cfg.class_count:
        cond_data["a"] = torch.as_tensor(class_ids, dtype=torch.long)
    if cfg.aug_label_dim and aug_labels is not None:
        cond_data["aug_label"] = torch.as_tensor(np.asarray(aug_labels), dtype=torch.float32)

    state = train_loop(
        denoiser, x, weighting, steps=steps, lr=lr, batch_size=batch_size,
        ema_decay=ema_decay, seed=rng_seed, cond_data=cond_data,
        checkpoint_path=checkpoint_path, checkpoint_every=checkpoint_every,
        checkpoint_extra={"image_cfg": cfg}, resume_from=resume_from,
        kind="image", snapshot_steps=snapshot_steps, stop_at_step=stop_at_step,
        config_hash=config_hash, lr_decay=lr_decay,
    )
    return denoiser, state.ema_denoiser(), state.loss_rows


def load_image_model(checkpoint_path, use_ema=True):
    from .training import load_checkpoint

    ck = load_checkpoint(checkpoint_path, kind="image")
    cfg = ck["extra"]["image_cfg"]
    raw = build_raw_net(cfg, seed=0)
    denoiser = diffusion_core.precondition(raw, ck["sigma_data"])
    denoiser.load_state_dict(ck["ema_state"] if use_ema else ck["model_state"])
    denoiser.eval()
    return denoiser, cfg, ck
