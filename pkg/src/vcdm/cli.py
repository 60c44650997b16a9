"""Command-line surface: cache embeddings, train both stages, sample by
method, evaluate, run the dimensionality sweep, and re-render plots.

Every artifact filename embeds the config hash, so runs under different
configs never collide. Stdout carries human-readable summaries only; data
goes to CSVs next to the figures.
"""

import csv
import glob as globmod
import hashlib
import math
import os
import re
import sys

import click
import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import diffusion_core, embedding_space, evaluation, pipeline, toys
from .aux_denoiser import AuxModelConfig, load_aux, train_aux
from .config import ConfigError, ExperimentConfig, artifact_path, config_hash, load_config
from .embedding_space import CacheCorruptError, read_cache, write_cache
from .image_denoiser import ImageModelConfig, load_image_model, train_image_model

_METHOD_MAP = {
    "vcdm": "vcdm",
    "edm": "edm_direct",
    "class-cond": "class_cond",
    "oracle": "vcdm_oracle",
}


def _load_cfg(config_path, seed=None, out=None):
    try:
        cfg = load_config(config_path) if config_path else ExperimentConfig()
    except (ConfigError, OSError) as e:
        raise click.ClickException(str(e))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    return cfg


def _dataset(cfg):
    """Returns (points/images, mode ids). Only the built-in ring toy ships
    data; image datasets arrive through a manifest of .npy files."""
    if cfg.dataset == "ring":
        rng = np.random.default_rng(cfg.dataset_seed)
        pts, ids = toys.make_ring_dataset(
            cfg.dataset_size, rng, n_modes=cfg.ring_modes, noise=cfg.ring_noise)
        return pts, ids
    from .data_aug import DatasetManifest

    manifest = DatasetManifest.load(cfg.dataset)
    images, labels = [], []
    for row in manifest.rows:
        images.append(np.load(row.path))
        labels.append(row.class_label if row.class_label is not None else 0)
    return np.stack(images), np.asarray(labels)


def _raw_embeddings(cfg, data, ids):
    if cfg.embedder == "ring_onehot":
        rng = np.random.default_rng(cfg.dataset_seed + 1)
        return toys.ring_embeddings(ids, rng, n_modes=cfg.ring_modes,
                                    noise=cfg.embedding_noise), "proxy"
    embedder = embedding_space.make_embedder(
        "proxy" if cfg.embedder == "proxy" else "clip_vit_b32",
        dim=cfg.embedding_dim)
    rows = np.stack([embedder.embed(img).values for img in data])
    return rows, embedder.source_tag


def _cache_path(cfg):
    return artifact_path(cfg, "embeddings.bin")


def _load_cache(cfg, expect_count):
    if not os.path.exists(_cache_path(cfg)):
        raise click.ClickException(
            f"no embedding cache at {_cache_path(cfg)}; run cache-embeddings "
            "first")
    rows, _ = read_cache(_cache_path(cfg))
    if len(rows) != expect_count:
        raise CacheCorruptError(
            f"{_cache_path(cfg)}: {len(rows)} rows for a {expect_count}-row "
            "dataset")
    return rows


def _conditioning(cfg, raw_rows):
    """Applies the configured reduction. Returns (y rows for stage 2,
    codebook or None, cluster distribution or None, pca transform or None)."""
    if cfg.method == "class-cond":
        k = cfg.kmeans_k or 8
        cb = embedding_space.kmeans_fit(
            raw_rows, K=k, rng=np.random.default_rng(cfg.dataset_seed + 2))
        cids = embedding_space.kmeans_assign(cb, raw_rows)
        dist = embedding_space.empirical_cluster_distribution(cb, raw_rows)
        return np.eye(cb.K)[cids], cb, dist, None
    if cfg.pca_dim:
        t = embedding_space.pca_fit(raw_rows, cfg.pca_dim)
        return embedding_space.pca_apply(t, raw_rows).values, None, None, t
    return raw_rows, None, None, None


def _image_cfg(cfg, y_dim):
    if cfg.image_mode == "mlp2d":
        return ImageModelConfig(
            mode="mlp2d", y_dim=y_dim,
            regime=_regime(cfg), mlp_hidden=cfg.mlp_hidden,
            mlp_layers=cfg.mlp_layers)
    return ImageModelConfig(
        mode="unet", resolution=cfg.image_resolution,
        channels=cfg.image_channels, base_width=cfg.image_base_width,
        y_dim=y_dim, regime=_regime(cfg))


def _regime(cfg):
    if cfg.method == "edm":
        return "uncond"
    if cfg.method == "class-cond":
        return "cluster_cond"
    return "y_cond"


def _lr_decay(cfg):
    return None if cfg.lr_decay == "none" else cfg.lr_decay


def _plan(cfg, method, count, seed, debug=False):
    return pipeline.SamplingPlan(
        method=_METHOD_MAP[method], count=count, seed=seed, debug=debug,
        stage1_schedule=diffusion_core.ScheduleConfig(num_steps=cfg.stage1_steps),
        stage2_sampler=diffusion_core.SamplerConfig(
            s_churn=cfg.s_churn, s_noise=cfg.s_noise),
        stage2_schedule=diffusion_core.ScheduleConfig(num_steps=cfg.stage2_steps),
    )


def _plan_hash(cfg, method, count, seed):
    msg = f"{config_hash(cfg)}|{method}|{count}|{seed}".encode()
    return hashlib.blake2b(msg, digest_size=6).hexdigest()


def _method_models(cfg, method, checkpoint=None):
    """Loads whatever the method needs; raises ClickException when a
    required checkpoint is missing."""
    path = checkpoint or artifact_path(cfg, "image.pt")
    if not os.path.exists(path):
        raise click.ClickException(f"not ready: missing image checkpoint {path}")
    model, _, _ = load_image_model(path)
    kwargs = {"image_model": model}
    data, ids = _dataset(cfg)
    raw = _load_cache(cfg, len(data))
    y, cb, dist, t = _conditioning(cfg, raw)
    if method == "vcdm":
        aux_path = artifact_path(cfg, "aux.pt")
        if not os.path.exists(aux_path):
            raise click.ClickException(
                f"not ready: missing stage-1 checkpoint {aux_path}")
        kwargs["aux_prior"] = load_aux(aux_path)
    elif method == "oracle":
        kwargs["dataset_embeddings"] = y
        kwargs["class_ids"] = ids
    elif method == "class-cond":
        kwargs["codebook"] = cb
        kwargs["cluster_distribution"] = dist
    return kwargs


def _save_grid(samples, path):
    """PNG tiling with ceil(sqrt(n)) columns; 2-D point batches get a
    scatter panel per tile so the same layout rule applies everywhere."""
    n = len(samples)
    side = math.ceil(math.sqrt(n))
    if samples.ndim == 2:  # (n, 2) toy points
        fig, axes = plt.subplots(side, side, figsize=(2 * side, 2 * side))
        axes = np.atleast_1d(axes).reshape(side, side)
        for i in range(side * side):
            ax = axes[i // side, i % side]
            ax.set_xlim(-6, 6), ax.set_ylim(-6, 6)
            ax.set_xticks([]), ax.set_yticks([])
            if i < n:
                ax.plot(samples[i, 0], samples[i, 1], "o", ms=4)
        fig.savefig(path, dpi=60)
        plt.close(fig)
        return side
    from PIL import Image

    imgs = np.asarray(samples, dtype=np.float64)
    lo, hi = imgs.min(), imgs.max()
    imgs = (imgs - lo) / (hi - lo + 1e-12)
    c, h, w = imgs.shape[1:]
    canvas = np.zeros((c, side * h, side * w))
    for i, img in enumerate(imgs):
        r, col = divmod(i, side)
        canvas[:, r * h : (r + 1) * h, col * w : (col + 1) * w] = img
    arr = (255 * canvas).astype(np.uint8)
    arr = arr[0] if c == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)
    return side


def _append_csv(path, row, fieldnames):
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        if fresh:
            writer.writeheader()
        writer.writerow(row)


def _prune_snapshots(checkpoint_path, keep, loss_rows):
    """Keep the last `keep` snapshots plus the best one by trailing loss."""
    snaps = {}
    for p in globmod.glob(checkpoint_path + ".step*"):
        m = re.match(r".*\.step(\d+)$", p)
        if m:
            snaps[int(m.group(1))] = p
    if not snaps:
        return []
    steps = sorted(snaps)
    retained = set(steps[-keep:])
    losses = np.asarray(loss_rows, dtype=np.float64)
    best, best_loss = None, np.inf
    for s in steps:
        window = losses[(losses[:, 0] > s - 200) & (losses[:, 0] <= s), 1]
        score = np.median(window) if len(window) else np.inf
        if score < best_loss:
            best, best_loss = s, score
    retained.add(best)
    for s in steps:
        if s not in retained:
            os.remove(snaps[s])
    return [snaps[s] for s in sorted(retained)]


@click.group()
def main():
    """Two-stage diffusion experiments: an embedding prior feeding a
    conditional image model, plus direct / cluster-conditional / oracle
    baselines."""


_config_opt = click.option("--config", "config_path", type=click.Path(), default=None,
                           help="Flat key=value config file.")
_seed_opt = click.option("--seed", type=int, default=None)
_out_opt = click.option("--out", type=click.Path(), default=None)


@main.command("cache-embeddings")
@_config_opt
@_seed_opt
@_out_opt
def cache_embeddings(config_path, seed, out):
    """Compute and cache one embedding row per dataset item (idempotent)."""
    cfg = _load_cfg(config_path, seed, out)
    data, ids = _dataset(cfg)
    path = _cache_path(cfg)
    if os.path.exists(path):
        try:
            rows, tag = read_cache(path)
        except CacheCorruptError as e:
            raise click.ClickException(str(e))
        if len(rows) == len(data):
            click.echo(f"cache complete ({len(rows)} rows), skipping: {path}")
            return
        raise click.ClickException(
            f"cache row count {len(rows)} != dataset size {len(data)}: {path}")
    try:
        rows, tag = _raw_embeddings(cfg, data, ids)
    except embedding_space.BackendUnavailableError as e:
        raise click.ClickException(str(e))
    write_cache(path, rows, tag)
    click.echo(f"cached {len(rows)} x {rows.shape[1]} embeddings -> {path}")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--which", type=click.Choice(["aux", "image"]), required=True)
@click.option("--resume", is_flag=True, help="Resume from the checkpoint.")
@click.option("--finetune-from", type=click.Path(), default=None,
              help="Unconditional image checkpoint to attach conditioning to.")
@click.option("--stop-at-step", type=int, default=None, hidden=True)
def train(config_path, seed, out, which, resume, finetune_from, stop_at_step):
    """Train the stage-1 prior or the stage-2 image model."""
    cfg = _load_cfg(config_path, seed, out)
    ckpt = artifact_path(cfg, f"{which}.pt")
    resume_from = ckpt if resume else None
    if resume and not os.path.exists(ckpt):
        raise click.ClickException(f"nothing to resume: {ckpt}")
    data, ids = _dataset(cfg)
    raw = _load_cache(cfg, len(data))
    y, cb, dist, t = _conditioning(cfg, raw)
    try:
        if which == "aux":
            acfg = AuxModelConfig(
                data_dim=y.shape[1], token_dim=cfg.aux_token_dim,
                num_layers=cfg.aux_layers, num_heads=cfg.aux_heads)
            _, rows = train_aux(
                y, acfg, rng_seed=cfg.seed, steps=cfg.aux_steps, lr=cfg.aux_lr,
                batch_size=cfg.aux_batch, ema_decay=cfg.aux_ema,
                checkpoint_path=ckpt, checkpoint_every=cfg.checkpoint_every,
                resume_from=resume_from, lr_decay=_lr_decay(cfg),
                config_hash=config_hash(cfg), stop_at_step=stop_at_step)
        else:
            icfg = _image_cfg(cfg, y.shape[1] if _regime(cfg) != "uncond" else 0)
            raw_net = None
            if finetune_from is not None:
                base, base_cfg, _ = load_image_model(finetune_from)
                from .image_denoiser import attach_zero_init_conditioning

                extended, _ = attach_zero_init_conditioning(
                    base, base_cfg, y_dim=icfg.y_dim)
                raw_net = extended.raw_net
            _, _, rows = train_image_model(
                data, icfg, rng_seed=cfg.seed, steps=cfg.image_steps,
                lr=cfg.image_lr, batch_size=cfg.image_batch,
                ema_decay=cfg.image_ema,
                embeddings=y if _regime(cfg) != "uncond" else None,
                checkpoint_path=ckpt, checkpoint_every=cfg.checkpoint_every,
                resume_from=resume_from, raw_net=raw_net, snapshot_steps=True,
                config_hash=config_hash(cfg), lr_decay=_lr_decay(cfg),
                stop_at_step=stop_at_step)
    except diffusion_core.NumericFailure as e:
        raise click.ClickException(f"training diverged: {e}")
    except Exception as e:
        from .training import ResumeMismatchError

        if isinstance(e, (ResumeMismatchError, FileNotFoundError)):
            raise click.ClickException(str(e))
        raise
    loss_csv = artifact_path(cfg, f"{which}_loss.csv")
    with open(loss_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows(rows)
    if which == "image":
        kept = _prune_snapshots(ckpt, cfg.keep_checkpoints, rows)
        click.echo(f"retained snapshots: {len(kept)}")
    click.echo(f"trained {which} for {rows[-1][0]} steps -> {ckpt}")
    click.echo(f"loss curve -> {loss_csv}")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--method", type=click.Choice(sorted(_METHOD_MAP)), default="vcdm")
@click.option("--count", type=int, default=16)
def sample(config_path, seed, out, method, count):
    """Draw samples, write a PNG grid plus a float32 tensor dump."""
    cfg = _load_cfg(config_path, seed, out)
    models = _method_models(cfg, method)
    plan = _plan(cfg, method, count, cfg.seed)
    try:
        batch = pipeline.sample_batch(plan, **models)
    except (pipeline.ConfigurationError, ValueError) as e:
        raise click.ClickException(str(e))
    ph = _plan_hash(cfg, method, count, cfg.seed)
    grid_path = artifact_path(cfg, f"{method}_{ph}_grid.png")
    dump_path = artifact_path(cfg, f"{method}_{ph}_samples.bin")
    side = _save_grid(batch, grid_path)
    write_cache(dump_path, batch.reshape(len(batch), -1), "samples")
    row = {"plan_hash": ph, "method": method, "count": count, "seed": cfg.seed,
           "grid": grid_path, "dump": dump_path}
    if method == "vcdm":
        rep = pipeline.timing_report(plan, models["aux_prior"],
                                     models["image_model"], n_items=4)
        row.update({k: f"{rep[k]:.3f}" for k in
                    ("stage1_ms", "stage2_ms", "overhead_fraction")})
        click.echo(
            f"timing: stage1 {rep['stage1_ms']:.1f} ms, "
            f"stage2 {rep['stage2_ms']:.1f} ms, "
            f"overhead {100 * rep['overhead_fraction']:.1f}%")
    _append_csv(artifact_path(cfg, "samples.csv"), row,
                ["plan_hash", "method", "count", "seed", "grid", "dump",
                 "stage1_ms", "stage2_ms", "overhead_fraction"])
    click.echo(f"{count} samples ({side}x{side} grid) -> {grid_path}")
    click.echo(f"tensor dump -> {dump_path}")


def _eval_one(cfg, method, n, checkpoint, reference, extractor, seed):
    models = _method_models(cfg, method, checkpoint=checkpoint)

    def generator(count):
        return pipeline.sample_batch(_plan(cfg, method, count, seed), **models)

    score, row = evaluation.fid_protocol(
        generator, reference, extractor, n,
        plan_hash=_plan_hash(cfg, method, n, seed), seed=seed, method=method)
    return score, row


@main.command("eval")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--method", type=click.Choice(sorted(_METHOD_MAP)), default="vcdm")
@click.option("--count", "n", type=int, default=None,
              help="Samples per score (defaults to eval_n).")
def eval_cmd(config_path, seed, out, method, n):
    """Score each retained image checkpoint against the reference set;
    appends CSV rows and renders a score-vs-step curve."""
    cfg = _load_cfg(config_path, seed, out)
    n = n or cfg.eval_n
    data, _ = _dataset(cfg)
    extractor = evaluation.FeatureExtractor(backend=cfg.feature_backend)
    ckpt = artifact_path(cfg, "image.pt")
    snaps = sorted(
        ((int(re.match(r".*\.step(\d+)$", p).group(1)), p)
         for p in globmod.glob(ckpt + ".step*")))
    if not snaps and os.path.exists(ckpt):
        _, _, payload = load_image_model(ckpt)
        snaps = [(payload["step"], ckpt)]
    if not snaps:
        raise click.ClickException(f"not ready: no image checkpoints at {ckpt}")
    csv_path = artifact_path(cfg, "metrics.csv")
    steps, scores = [], []
    for step, path in snaps:
        try:
            score, row = _eval_one(cfg, method, n, path, data, extractor,
                                   cfg.seed)
        except (ValueError, pipeline.ConfigurationError) as e:
            raise click.ClickException(str(e))
        row["step"] = step
        _append_csv(csv_path, row,
                    ["plan_hash", "method", "step", "n", "ref_n", "extractor",
                     "score", "seed"])
        steps.append(step), scores.append(score)
        click.echo(f"step {step}: {method} score {score:.4f} (n={n})")
    fig, ax = plt.subplots()
    ax.plot(steps, scores, marker="o", label=method)
    ax.set_xlabel("training step")
    ax.set_ylabel(f"Frechet score ({cfg.feature_backend} features)")
    ax.legend()
    fig_path = artifact_path(cfg, f"{method}_score_vs_step.png")
    fig.savefig(fig_path, dpi=100)
    plt.close(fig)
    click.echo(f"metrics -> {csv_path}")
    click.echo(f"curve -> {fig_path}")


@main.command("sweep-dim")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--dims", default="2,4,6,8", help="Comma-separated grid.")
@click.option("--budgets", default="200,1000", help="Training steps per arm.")
@click.option("--seeds", type=int, default=1, help="Seeds per grid point.")
@click.option("--arm", type=click.Choice(["pca", "kmeans", "both"]),
              default="pca")
def sweep_dim(config_path, seed, out, dims, budgets, seeds, arm):
    """Score vs conditioning dimensionality at several training budgets.

    Each point compresses the embeddings (PCA to k dims or K-means one-hots),
    trains the image model in that regime for the budget, and scores it with
    ground-truth conditioning.
    """
    cfg = _load_cfg(config_path, seed, out)
    data, ids = _dataset(cfg)
    raw = _load_cache(cfg, len(data))
    dims = [int(d) for d in dims.split(",")]
    budgets = [int(b) for b in budgets.split(",")]
    bad = [d for d in dims if d > raw.shape[1]]
    if bad:
        raise click.ClickException(
            f"grid entries {bad} exceed embedder dim {raw.shape[1]}")
    arms = ["pca", "kmeans"] if arm == "both" else [arm]
    extractor = evaluation.FeatureExtractor(backend=cfg.feature_backend)
    csv_path = artifact_path(cfg, "sweep.csv")
    fields = ["arm", "dim_or_K", "budget", "score", "seed", "recon_error"]
    results = []
    for arm_name in arms:
        for d in dims:
            if arm_name == "pca":
                t = embedding_space.pca_fit(raw, d)
                y = embedding_space.pca_apply(t, raw).values
                recon = embedding_space.pca_reconstruction_error(t, raw)
            else:
                cb = embedding_space.kmeans_fit(
                    raw, K=d, rng=np.random.default_rng(cfg.dataset_seed + 2))
                y = np.eye(d)[embedding_space.kmeans_assign(cb, raw)]
                recon = ""
            for budget in budgets:
                for s in range(seeds):
                    run_seed = cfg.seed + 1000 * s
                    icfg = _image_cfg(cfg, d)
                    _, ema, _ = train_image_model(
                        data, icfg, rng_seed=run_seed, steps=budget,
                        lr=cfg.image_lr, batch_size=cfg.image_batch,
                        ema_decay=cfg.image_ema, embeddings=y,
                        lr_decay=_lr_decay(cfg))

                    def generator(count, _ema=ema, _y=y, _s=run_seed):
                        plan = _plan(cfg, "oracle", count, _s)
                        return pipeline.oracle_sample(plan, _ema, _y)

                    score, _ = evaluation.fid_protocol(
                        generator, data, extractor, cfg.eval_n,
                        seed=run_seed, method=arm_name)
                    row = {"arm": arm_name, "dim_or_K": d, "budget": budget,
                           "score": score, "seed": run_seed,
                           "recon_error": recon}
                    results.append(row)
                    _append_csv(csv_path, row, fields)
                    click.echo(
                        f"{arm_name} dim={d} budget={budget} seed={run_seed}: "
                        f"score {score:.4f}")
    fig, ax = plt.subplots()
    for arm_name in arms:
        for budget in budgets:
            pts = [(r["dim_or_K"], r["score"]) for r in results
                   if r["arm"] == arm_name and r["budget"] == budget]
            xs = sorted({p[0] for p in pts})
            med = [np.median([p[1] for p in pts if p[0] == x]) for x in xs]
            ax.plot(xs, med, marker="o", label=f"{arm_name}, {budget} steps")
    ax.set_xlabel("conditioning dimensionality")
    ax.set_ylabel("Frechet score")
    ax.legend()
    fig_path = artifact_path(cfg, "sweep.png")
    fig.savefig(fig_path, dpi=100)
    plt.close(fig)
    click.echo(f"sweep -> {csv_path}")
    click.echo(f"figure -> {fig_path}")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
def plot(config_path, seed, out):
    """Re-render figures from the CSVs already in the output directory."""
    cfg = _load_cfg(config_path, seed, out)
    made = []
    for which in ("aux", "image"):
        path = artifact_path(cfg, f"{which}_loss.csv")
        if not os.path.exists(path):
            continue
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        fig, ax = plt.subplots()
        ax.plot(rows[:, 0], rows[:, 1], lw=0.7)
        ax.set_yscale("log")
        ax.set_xlabel("step"), ax.set_ylabel("loss")
        fig_path = artifact_path(cfg, f"{which}_loss.png")
        fig.savefig(fig_path, dpi=100)
        plt.close(fig)
        made.append(fig_path)
    metrics = artifact_path(cfg, "metrics.csv")
    if os.path.exists(metrics):
        with open(metrics) as f:
            rows = list(csv.DictReader(f))
        fig, ax = plt.subplots()
        methods = sorted({r["method"] for r in rows})
        for m in methods:
            pts = sorted((int(r["step"]), float(r["score"]))
                         for r in rows if r["method"] == m)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=m)
        ax.set_xlabel("training step"), ax.set_ylabel("Frechet score")
        ax.legend()
        fig_path = artifact_path(cfg, "score_vs_step.png")
        fig.savefig(fig_path, dpi=100)
        plt.close(fig)
        made.append(fig_path)
    if not made:
        raise click.ClickException("no CSVs found to plot")
    for p in made:
        click.echo(f"figure -> {p}")


if __name__ == "__main__":
    sys.exit(main())
