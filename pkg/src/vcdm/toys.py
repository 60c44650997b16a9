"""Small synthetic datasets for tests and desk-scale end-to-end runs.

The workhorse is a 2-D mixture of 8 Gaussians on a ring, with "embeddings"
that are mode one-hots plus noise — a stand-in for semantic embeddings where
the embedding tells you which mode a point came from but not where in the
mode it sits.
"""

import numpy as np


def ring_modes(n_modes=8, radius=4.0):
    ang = 2 * np.pi * np.arange(n_modes) / n_modes
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def make_ring_dataset(n, rng, n_modes=8, radius=4.0, noise=0.25):
    """Returns (points n x 2, mode ids n)."""
    modes = ring_modes(n_modes, radius)
    ids = rng.integers(n_modes, size=n)
    pts = modes[ids] + noise * rng.standard_normal((n, 2))
    return pts, ids


def ring_embeddings(mode_ids, rng, n_modes=8, noise=0.05, scale=2.0):
    """Mode one-hots (scaled) plus Gaussian noise, one row per point."""
    emb = scale * np.eye(n_modes)[np.asarray(mode_ids)]
    return emb + noise * rng.standard_normal(emb.shape)
