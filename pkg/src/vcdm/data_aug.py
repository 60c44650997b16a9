"""Dataset ingestion and image-space augmentation with labels.

Augmentations are applied in pixel space and then fed through the embedder,
so the auxiliary model can be told which ops were applied and conditioned on
"no augmentation" at sampling time (the all-zeros label).
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# one flag slot per op; the all-zeros vector means "no augmentation"
AUG_OPS = ("hflip", "rot_cw", "rot_ccw", "jitter")
ROTATION_DEG = 15.0
JITTER_STRENGTH = 0.2


@dataclass(frozen=True)
class AugmentationLabel:
    op_flags: tuple

    def __post_init__(self):
        if len(self.op_flags) != len(AUG_OPS):
            raise ValueError(f"op_flags must have length {len(AUG_OPS)}")

    @classmethod
    def none(cls):
        return cls((0,) * len(AUG_OPS))

    @classmethod
    def from_ops(cls, ops):
        return cls(tuple(1 if op in ops else 0 for op in AUG_OPS))

    def ops(self):
        return tuple(op for op, f in zip(AUG_OPS, self.op_flags) if f)

    def vector(self):
        return np.asarray(self.op_flags, dtype=np.float64)

    @property
    def is_none(self):
        return not any(self.op_flags)


def apply_ops(image, ops, jitter_shift=0.0):
    """Apply a fixed op set to an image in [0,1]. Deterministic."""
    img = np.asarray(image, dtype=np.float64)
    if "hflip" in ops:
        img = img[:, ::-1].copy()
    if "rot_cw" in ops:
        img = _rotate(img, -ROTATION_DEG)
    if "rot_ccw" in ops:
        img = _rotate(img, ROTATION_DEG)
    if "jitter" in ops:
        img = np.clip(img + jitter_shift, 0.0, 1.0)
    return img


def _rotate(img, deg):
    axes = (1, 0) if img.ndim == 2 else (1, 0)
    return ndimage.rotate(img, deg, axes=axes, reshape=False, order=1, mode="nearest")


def augment(image, rng):
    """Randomly augment an image: each op family drawn independently with
    probability 0.5. Returns (augmented image, label recording the ops)."""
    ops = []
    if rng.random() < 0.5:
        ops.append("hflip")
    if rng.random() < 0.5:
        ops.append("rot_cw" if rng.random() < 0.5 else "rot_ccw")
    jitter_shift = 0.0
    if rng.random() < 0.5:
        ops.append("jitter")
        jitter_shift = (rng.random() * 2 - 1) * JITTER_STRENGTH
    return apply_ops(image, ops, jitter_shift), AugmentationLabel.from_ops(ops)


def augmented_embedding(image, rng, embedder):
    """Embed the augmented image (never the original)."""
    aug_img, label = augment(image, rng)
    return embedder.embed(aug_img), label


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class ManifestRow:
    path: str
    shape: tuple
    class_label: int | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """Line-delimited record file tying images, optional class labels, and
    the embedding cache together."""

    rows: list = field(default_factory=list)
    embedding_cache: str | None = None
    cache_complete: bool = False

    def save(self, path):
        with open(path, "w") as f:
            header = {
                "embedding_cache": self.embedding_cache,
                "cache_complete": self.cache_complete,
            }
            f.write(json.dumps({"_header": header}) + "\n")
            for r in self.rows:
                f.write(
                    json.dumps(
                        {
                            "path": r.path,
                            "shape": list(r.shape),
                            "class_label": r.class_label,
                            "split": r.split,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path):
        rows = []
        header = {}
        with open(path) as f:
            for line in f:
                rec = json.loads(line)
                if "_header" in rec:
                    header = rec["_header"]
                    continue
                rows.append(
                    ManifestRow(
                        rec["path"],
                        tuple(rec["shape"]),
                        rec.get("class_label"),
                        rec.get("split", "train"),
                    )
                )
        return cls(
            rows,
            embedding_cache=header.get("embedding_cache"),
            cache_complete=header.get("cache_complete", False),
        )

    def split_rows(self, split):
        return [r for r in self.rows if r.split == split]
