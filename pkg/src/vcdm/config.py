"""Flat key=value experiment configs with a content hash.

One config plus a seed fully determines a run; the hash of the canonical
serialization is embedded in every artifact filename so runs under different
settings can never collide on output paths.
"""

import dataclasses
import hashlib
import os


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    # dataset: the built-in 2-D ring toy or a manifest of image files
    dataset: str = "ring"  # "ring" | path to a manifest file
    dataset_size: int = 4000
    dataset_seed: int = 0
    ring_modes: int = 8
    ring_noise: float = 0.25

    # embeddings
    embedder: str = "ring_onehot"  # ring_onehot | proxy | clip
    embedding_dim: int = 8
    embedding_noise: float = 0.05
    pca_dim: int = 0  # 0 = no PCA reduction
    kmeans_k: int = 0  # 0 = no codebook

    # stage-1 prior
    aux_token_dim: int = 64
    aux_layers: int = 2
    aux_heads: int = 4
    aux_steps: int = 2000
    aux_lr: float = 1e-3
    aux_batch: int = 64
    aux_ema: float = 0.99

    # stage-2 image model
    image_mode: str = "mlp2d"  # mlp2d | unet
    image_resolution: int = 32
    image_channels: int = 3
    image_base_width: int = 32
    mlp_hidden: int = 128
    mlp_layers: int = 3
    image_steps: int = 4000
    image_lr: float = 2e-3
    image_batch: int = 64
    image_ema: float = 0.99
    lr_decay: str = "cosine"  # none | cosine

    # sampling
    stage1_steps: int = 64
    stage2_steps: int = 40
    s_churn: float = 0.0
    s_noise: float = 1.0

    # evaluation
    eval_n: int = 2000
    feature_backend: str = "identity"

    # run plumbing
    method: str = "vcdm"
    seed: int = 0
    out_dir: str = "runs"
    checkpoint_every: int = 500
    keep_checkpoints: int = 3

    def __post_init__(self):
        if self.method not in ("vcdm", "edm", "class-cond", "oracle"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if self.image_mode not in ("mlp2d", "unet"):
            raise ConfigError(f"unknown image_mode {self.image_mode!r}")


_FIELDS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key, text):
    ftype = _FIELDS[key]
    try:
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {ftype.__name__}, got {text!r}")
    return text


def parse_config(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, val)
    return ExperimentConfig(**values)


def load_config(path):
    with open(path) as f:
        return parse_config(f.read())


def serialize_config(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)}"
             for f in dataclasses.fields(ExperimentConfig)]
    return "\n".join(lines) + "\n"


def save_config(cfg, path):
    with open(path, "w") as f:
        f.write(serialize_config(cfg))


# run identity: everything except where the artifacts land and which seed a
# given command is invoked with (the plan hash covers the seed for samples)
_HASH_EXCLUDED = ("seed", "out_dir")


def config_hash(cfg):
    """12 hex chars of the sha256 of the canonical serialization, minus the
    seed and output directory."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}"
             for f in dataclasses.fields(ExperimentConfig)
             if f.name not in _HASH_EXCLUDED]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


def artifact_path(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, f"{config_hash(cfg)}_{name}")
