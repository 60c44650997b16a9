"""Seed-deterministic training loop with EMA weights and resumable
checkpoints.

All randomness (batch selection, sigma draws, corruption noise) flows
through one torch.Generator whose state is stored in every checkpoint, so a
resumed run continues bitwise-identically to an uninterrupted one.
"""

import copy
import os
from dataclasses import dataclass, field

import torch

from . import diffusion_core


class ResumeMismatchError(RuntimeError):
    """Checkpoint does not match the requested training configuration."""


@dataclass
class TrainState:
    denoiser: torch.nn.Module
    optimizer: torch.optim.Optimizer
    ema_state: dict
    gen: torch.Generator
    step: int = 0
    loss_rows: list = field(default_factory=list)
    sigma_data: float = 1.0
    ema_decay: float = 0.999
    sched_state: dict | None = None

    def ema_denoiser(self):
        model = copy.deepcopy(self.denoiser)
        model.load_state_dict(self.ema_state)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model


def _ema_update(ema_state, model, decay):
    with torch.no_grad():
        msd = model.state_dict()
        for k, v in ema_state.items():
            if v.dtype.is_floating_point:
                v.mul_(decay).add_(msd[k], alpha=1 - decay)
            else:
                v.copy_(msd[k])


def save_checkpoint(path, state, kind, extra=None, config_hash=None):
    payload = {
        "kind": kind,
        "step": state.step,
        "model_state": state.denoiser.state_dict(),
        "ema_state": state.ema_state,
        "opt_state": state.optimizer.state_dict(),
        "gen_state": state.gen.get_state(),
        "loss_rows": state.loss_rows,
        "sigma_data": state.sigma_data,
        "ema_decay": state.ema_decay,
        "sched_state": state.sched_state,
        "extra": extra or {},
        "config_hash": config_hash,
    }
    tmp = str(path) + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, kind=None, config_hash=None):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ck = torch.load(path, weights_only=False)
    if kind is not None and ck.get("kind") != kind:
        raise ResumeMismatchError(
            f"checkpoint kind {ck.get('kind')!r} != expected {kind!r}"
        )
    if config_hash is not None and ck.get("config_hash") not in (None, config_hash):
        raise ResumeMismatchError(
            f"checkpoint config hash {ck.get('config_hash')} != {config_hash}"
        )
    return ck


def train_loop(denoiser, data, weighting, steps, lr=1e-4, batch_size=64,
               ema_decay=0.999, seed=0, cond_data=None, checkpoint_path=None,
               checkpoint_every=500, checkpoint_extra=None, resume_from=None,
               kind="model", config_hash=None, snapshot_steps=False,
               stop_at_step=None, lr_decay=None):
    """Run (or resume) denoising-loss training. Returns the final TrainState.

    ``stop_at_step`` lets a caller interrupt early (used by the resume
    tests); the checkpoint written at that point continues bitwise.
    """
    cond_data = cond_data or {}
    gen = torch.Generator()
    gen.manual_seed(seed)
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=lr)
    scheduler = None
    if lr_decay == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=steps)
    elif lr_decay is not None:
        raise ValueError(f"unknown lr_decay {lr_decay!r}")
    state = TrainState(
        denoiser=denoiser,
        optimizer=optimizer,
        ema_state={k: v.detach().clone() for k, v in denoiser.state_dict().items()},
        gen=gen,
        sigma_data=weighting.sigma_data,
        ema_decay=ema_decay,
    )

    if resume_from is not None:
        ck = load_checkpoint(resume_from, kind=kind, config_hash=config_hash)
        denoiser.load_state_dict(ck["model_state"])
        optimizer.load_state_dict(ck["opt_state"])
        if scheduler is not None and ck.get("sched_state") is not None:
            scheduler.load_state_dict(ck["sched_state"])
        state.ema_state = ck["ema_state"]
        gen.set_state(ck["gen_state"])
        state.step = ck["step"]
        state.loss_rows = list(ck["loss_rows"])

    n = data.shape[0]
    last = steps if stop_at_step is None else min(stop_at_step, steps)
    while state.step < last:
        idx = torch.randint(n, (batch_size,), generator=gen)
        batch = data[idx]
        cond = {k: v[idx] for k, v in cond_data.items()}
        try:
            loss = diffusion_core.denoising_loss(denoiser, batch, weighting, gen, cond)
        except diffusion_core.NumericFailure as e:
            raise diffusion_core.NumericFailure(f"step {state.step}: {e}") from e
        if not torch.isfinite(loss):
            raise diffusion_core.NumericFailure(
                f"non-finite loss at step {state.step}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if scheduler is not None:
            scheduler.step()
        _ema_update(state.ema_state, denoiser, ema_decay)
        state.step += 1
        state.loss_rows.append((state.step, loss.item()))
        if checkpoint_path and (state.step % checkpoint_every == 0 or state.step == last):
            state.sched_state = scheduler.state_dict() if scheduler else None
            save_checkpoint(checkpoint_path, state, kind, checkpoint_extra, config_hash)
            if snapshot_steps:
                save_checkpoint(
                    f"{checkpoint_path}.step{state.step}", state, kind,
                    checkpoint_extra, config_hash,
                )
    return state
