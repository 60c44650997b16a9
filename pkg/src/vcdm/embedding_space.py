"""Semantic embedding production and compression.

Backends map images to fixed-dimension embedding vectors: a pretrained CLIP
ViT-B/32 adapter (external weights, optional) and a deterministic proxy that
needs no download. PCA and K-means provide the dimensionality/discreteness
sweep machinery, and a flat binary cache format keeps expensive embedding
passes one-shot.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

CACHE_MAGIC = b"VCDMEMB1"
SOURCE_TAGS = ("clip_vit_b32", "proxy", "pca_k", "kmeans_onehot")


class BackendUnavailableError(RuntimeError):
    """An embedder backend cannot run in this environment."""


class DegenerateCodebookError(ValueError):
    """K-means asked for more clusters than distinct points."""


class CacheCorruptError(RuntimeError):
    """Embedding cache file failed validation."""


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    source_tag: str

    def __post_init__(self):
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"unknown source_tag {self.source_tag!r}")
        if not np.isfinite(self.values).all():
            raise ValueError("embedding contains non-finite entries")

    @property
    def dim(self):
        return self.values.shape[-1]


class ProxyEmbedder:
    """Deterministic offline embedder: mean-pooled patch statistics passed
    through a fixed-seed random orthogonal projection. No training, no
    external weights; a stand-in for CLIP at desk scale."""

    source_tag = "proxy"

    def __init__(self, dim=64, patch=8, seed=1234):
        self.dim = dim
        self.patch = patch
        rs = np.random.RandomState(seed)
        # raw feature per patch: mean, std, channel means -> pooled stats
        self._proj = None  # lazily sized to the feature length
        self._seed_state = rs

    def _projection(self, feat_len):
        if self._proj is None or self._proj.shape[1] != feat_len:
            rs = np.random.RandomState(4321 + feat_len)
            side = max(self.dim, feat_len)
            q, _ = np.linalg.qr(rs.standard_normal((side, side)))
            self._proj = q[: self.dim, :feat_len]
        return self._proj

    def embed(self, image):
        """image: float array (H, W) or (H, W, C), any range."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        h, w, c = img.shape
        p = self.patch
        feats, pos = [], []
        for i in range(0, h - h % p, p):
            for j in range(0, w - w % p, p):
                block = img[i : i + p, j : j + p]
                feats.append([block.mean(), block.std()] + list(block.mean(axis=(0, 1))))
                pos.append([i / h, j / w])
        f = np.asarray(feats)
        pos = np.asarray(pos)
        # position-weighted pools keep the embedding sensitive to layout
        wx = f * pos[:, 0:1]
        wy = f * pos[:, 1:2]
        pooled = np.concatenate(
            [f.mean(axis=0), f.std(axis=0), f.max(axis=0), wx.mean(axis=0), wy.mean(axis=0)]
        )
        proj = self._projection(pooled.shape[0])
        out = proj @ pooled
        return Embedding(out.astype(np.float64), self.source_tag)


class ClipEmbedder:
    """Adapter around released CLIP ViT-B/32 weights. The weights are an
    external dependency located via the VCDM_CLIP_WEIGHTS env var; if they
    are missing this backend refuses loudly rather than silently degrading."""

    source_tag = "clip_vit_b32"
    dim = 512

    def __init__(self, weights_path=None):
        path = weights_path or os.environ.get("VCDM_CLIP_WEIGHTS")
        if not path or not os.path.exists(path):
            raise BackendUnavailableError(
                "CLIP ViT-B/32 weights not found; set VCDM_CLIP_WEIGHTS to a "
                "local checkpoint or use the proxy backend (--embedder proxy)"
            )
        try:
            from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        except ImportError as e:
            raise BackendUnavailableError(
                f"transformers not importable for the CLIP backend: {e}"
            ) from e
        self._model = CLIPVisionModelWithProjection.from_pretrained(path)
        self._model.eval()
        self._processor = CLIPImageProcessor.from_pretrained(path)

    def embed(self, image):
        import torch

        img = np.asarray(image)
        if img.dtype != np.uint8:
            img = np.clip(img * 255.0, 0, 255).astype(np.uint8)
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        inputs = self._processor(images=img, return_tensors="pt")
        with torch.no_grad():
            out = self._model(**inputs).image_embeds[0]
        return Embedding(out.double().numpy(), self.source_tag)


def make_embedder(backend, dim=64):
    if backend == "proxy":
        return ProxyEmbedder(dim=dim)
    if backend == "clip_vit_b32":
        return ClipEmbedder()
    raise ValueError(f"unknown embedder backend {backend!r}")


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PcaTransform:
    mean: np.ndarray
    components: np.ndarray       # (k, d), rows orthonormal
    explained_variance: np.ndarray  # (k,), descending

    def __post_init__(self):
        gram = self.components @ self.components.T
        if np.abs(gram - np.eye(self.components.shape[0])).max() > 1e-8:
            raise ValueError("PCA components are not orthonormal")
        ev = self.explained_variance
        if np.any(ev[:-1] < ev[1:] - 1e-12):
            raise ValueError("explained_variance must be descending")

    @property
    def k(self):
        return self.components.shape[0]


def pca_fit(embeddings, k):
    """Top-k principal directions of the centered data (SVD)."""
    x = _stack(embeddings)
    n, d = x.shape
    if n == 0 or k < 1:
        raise ValueError("need a nonempty dataset and k >= 1")
    if k > d:
        raise ValueError(f"k={k} exceeds embedding dimension {d}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2 / max(n - 1, 1)
    comps = vt[:k]
    ev = var[:k]
    if k > comps.shape[0]:  # n < k <= d: pad with an orthonormal complement
        raise ValueError(f"need at least k={k} samples, got {n}")
    return PcaTransform(mean, comps, ev)


def pca_apply(t, y):
    v = y.values if isinstance(y, Embedding) else np.asarray(y)
    if v.shape[-1] != t.mean.shape[0]:
        raise ValueError(f"dimension mismatch: {v.shape[-1]} vs {t.mean.shape[0]}")
    z = (v - t.mean) @ t.components.T
    return Embedding(z, "pca_k")


def pca_invert(t, z):
    v = z.values if isinstance(z, Embedding) else np.asarray(z)
    if v.shape[-1] != t.k:
        raise ValueError(f"dimension mismatch: {v.shape[-1]} vs k={t.k}")
    y = v @ t.components + t.mean
    return Embedding(y, "pca_k")


def pca_reconstruction_error(t, embeddings):
    x = _stack(embeddings)
    rec = pca_invert(t, pca_apply(t, x).values).values
    return float(np.mean(np.sum((x - rec) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# K-means


@dataclass(frozen=True)
class KMeansCodebook:
    centroids: np.ndarray  # (K, d)

    @property
    def K(self):
        return self.centroids.shape[0]


def kmeans_fit(embeddings, K, rng, max_iter=300, tol=1e-6):
    """Lloyd's algorithm with k-means++ seeding. Ties in assignment break
    to the lowest centroid index; iteration stops when the max centroid
    shift drops below tol."""
    x = _stack(embeddings)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if K < 1:
        raise ValueError("K must be >= 1")
    distinct = np.unique(x, axis=0)
    if K > distinct.shape[0]:
        raise DegenerateCodebookError(
            f"K={K} exceeds the {distinct.shape[0]} distinct points in the dataset"
        )
    centroids = _kmeans_pp_init(x, K, rng)
    prev_obj = np.inf
    for _ in range(max_iter):
        labels = _nearest(x, centroids)
        new_centroids = centroids.copy()
        for j in range(K):
            members = x[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        obj = float(np.sum((x - centroids[_nearest(x, centroids)]) ** 2))
        assert obj <= prev_obj + 1e-9, "Lloyd objective increased"
        prev_obj = obj
        if shift < tol:
            break
    return KMeansCodebook(centroids)


def _kmeans_pp_init(x, K, rng):
    n = x.shape[0]
    first = int(rng.integers(n))
    centroids = [x[first]]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for _ in range(1, K):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        idx = int(rng.choice(n, p=probs))
        centroids.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - centroids[-1]) ** 2, axis=1))
    return np.stack(centroids)


def _nearest(x, centroids):
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)  # argmin breaks ties to the lowest index


def kmeans_assign(cb, y):
    v = y.values if isinstance(y, Embedding) else np.asarray(y)
    single = v.ndim == 1
    ids = _nearest(np.atleast_2d(v), cb.centroids)
    return int(ids[0]) if single else ids


def kmeans_embed(cb, cluster_id, mode="onehot"):
    """Represent a cluster id as an embedding: a one-hot indicator or the
    centroid vector itself."""
    if not 0 <= cluster_id < cb.K:
        raise ValueError(f"cluster id {cluster_id} out of range [0, {cb.K})")
    if mode == "onehot":
        v = np.zeros(cb.K)
        v[cluster_id] = 1.0
        return Embedding(v, "kmeans_onehot")
    if mode == "centroid":
        return Embedding(cb.centroids[cluster_id].copy(), "kmeans_onehot")
    raise ValueError(f"unknown mode {mode!r}")


def kmeans_objective(cb, embeddings):
    x = _stack(embeddings)
    return float(np.sum((x - cb.centroids[_nearest(x, cb.centroids)]) ** 2))


def empirical_cluster_distribution(cb, embeddings):
    """Normalized assignment counts over the dataset."""
    x = _stack(embeddings)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    counts = np.bincount(_nearest(x, cb.centroids), minlength=cb.K).astype(np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Embedding cache (flat binary table)

_HEADER = struct.Struct("<8sIQI32s")  # magic, version, count, dim, source_tag


def write_cache(path, rows, source_tag):
    """rows: (n, d) float array. Row-major float32 after a fixed header."""
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    tag = source_tag.encode().ljust(32, b"\0")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CACHE_MAGIC, 1, rows.shape[0], rows.shape[1], tag))
        f.write(rows.tobytes())


def read_cache(path):
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CacheCorruptError(f"{path}: truncated header")
        magic, version, count, dim, tag = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise CacheCorruptError(f"{path}: bad magic {magic!r}")
        if version != 1:
            raise CacheCorruptError(f"{path}: unsupported version {version}")
        data = np.frombuffer(f.read(), dtype=np.float32)
    if data.size != count * dim:
        raise CacheCorruptError(
            f"{path}: expected {count * dim} floats, found {data.size}"
        )
    return data.reshape(count, dim).astype(np.float64), tag.rstrip(b"\0").decode()


def _stack(embeddings):
    if isinstance(embeddings, np.ndarray):
        return np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    return np.stack(
        [e.values if isinstance(e, Embedding) else np.asarray(e) for e in embeddings]
    ).astype(np.float64)
