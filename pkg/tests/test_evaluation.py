import numpy as np
import pytest
import scipy.linalg

from vcdm.embedding_space import BackendUnavailableError
from vcdm.evaluation import (
    FeatureExtractor,
    GaussianStats,
    fid_protocol,
    fit_gaussian,
    frechet_distance,
    mode_counts,
    split_half_baseline,
    toy_divergence,
)


def random_psd(rng, k):
    a = rng.standard_normal((k, k))
    return a @ a.T + 0.1 * np.eye(k)


def random_stats(rng, k):
    return GaussianStats(mean=rng.standard_normal(k), cov=random_psd(rng, k),
                         count=100)


def ring_modes(n_modes=8, radius=4.0):
    ang = 2 * np.pi * np.arange(n_modes) / n_modes
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def ring_samples(rng, n, modes=None, noise=0.1, skip_mode=None):
    modes = ring_modes() if modes is None else modes
    ids = rng.integers(len(modes), size=n)
    if skip_mode is not None:
        ids[ids == skip_mode] = (skip_mode + 1) % len(modes)
    return modes[ids] + noise * rng.standard_normal((n, 2))


class TestGaussianStats:
    def test_asymmetric_cov_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            GaussianStats(mean=np.zeros(2),
                          cov=np.array([[1.0, 0.5], [0.0, 1.0]]), count=5)

    def test_negative_eigenvalue_rejected(self):
        with pytest.raises(ValueError, match="eigenvalue"):
            GaussianStats(mean=np.zeros(2),
                          cov=np.array([[1.0, 0.0], [0.0, -0.5]]), count=5)

    def test_tiny_negative_eigenvalue_tolerated(self):
        g = GaussianStats(mean=np.zeros(1), cov=np.array([[-5e-9]]), count=5)
        assert g.dim == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            GaussianStats(mean=np.zeros(3), cov=np.eye(2), count=5)


class TestFrechetDistance:
    def test_identical_gaussians_zero(self):
        g = random_stats(np.random.default_rng(0), 5)
        assert abs(frechet_distance(g, g)) < 1e-10

    def test_univariate_mean_shift(self):
        g1 = GaussianStats(mean=[0.0], cov=[[1.0]], count=2)
        g2 = GaussianStats(mean=[1.0], cov=[[1.0]], count=2)
        assert frechet_distance(g1, g2) == pytest.approx(1.0, abs=1e-12)

    def test_univariate_variance_gap(self):
        # closed form (s1 - s2)^2 = (1 - 2)^2 = 1
        g1 = GaussianStats(mean=[0.0], cov=[[1.0]], count=2)
        g2 = GaussianStats(mean=[0.0], cov=[[4.0]], count=2)
        assert frechet_distance(g1, g2) == pytest.approx(1.0, abs=1e-8)

    def test_diagonal_closed_form(self):
        # independent coordinates: sum of univariate distances
        rng = np.random.default_rng(3)
        mu1, mu2 = rng.standard_normal(4), rng.standard_normal(4)
        v1, v2 = rng.uniform(0.5, 3, 4), rng.uniform(0.5, 3, 4)
        g1 = GaussianStats(mean=mu1, cov=np.diag(v1), count=2)
        g2 = GaussianStats(mean=mu2, cov=np.diag(v2), count=2)
        expect = ((mu1 - mu2) ** 2).sum() + ((np.sqrt(v1) - np.sqrt(v2)) ** 2).sum()
        assert frechet_distance(g1, g2) == pytest.approx(expect, rel=1e-10)

    def test_against_scipy_sqrtm(self):
        rng = np.random.default_rng(4)
        g1, g2 = random_stats(rng, 6), random_stats(rng, 6)
        cross = np.trace(scipy.linalg.sqrtm(g1.cov @ g2.cov).real)
        expect = (((g1.mean - g2.mean) ** 2).sum() + np.trace(g1.cov)
                  + np.trace(g2.cov) - 2 * cross)
        assert frechet_distance(g1, g2) == pytest.approx(expect, abs=1e-8)

    def test_symmetry_100_random_pairs(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            k = int(rng.integers(1, 8))
            g1, g2 = random_stats(rng, k), random_stats(rng, k)
            assert abs(frechet_distance(g1, g2)
                       - frechet_distance(g2, g1)) < 1e-8

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            g1, g2 = random_stats(rng, 4), random_stats(rng, 4)
            assert frechet_distance(g1, g2) >= 0.0

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(7)
        with pytest.raises(ValueError, match="mismatch"):
            frechet_distance(random_stats(rng, 2), random_stats(rng, 3))


class TestFitGaussian:
    def test_two_points_hand_arithmetic(self):
        g = fit_gaussian(np.array([[0.0], [2.0]]))
        assert g.mean[0] == pytest.approx(1.0)
        assert g.cov[0, 0] == pytest.approx(2.0)  # unbiased: (1+1)/(2-1)

    def test_monte_carlo_recovery(self):
        rng = np.random.default_rng(8)
        cov = random_psd(rng, 3)
        mean = np.array([1.0, -2.0, 0.5])
        draws = rng.multivariate_normal(mean, cov, size=100_000)
        g = fit_gaussian(draws)
        assert np.linalg.norm(g.cov - cov) < 0.02 * np.linalg.norm(cov)
        assert np.allclose(g.mean, mean, atol=0.05)

    def test_cov_symmetric_exactly(self):
        g = fit_gaussian(np.random.default_rng(9).standard_normal((50, 4)))
        assert (g.cov == g.cov.T).all()

    def test_too_few_rows(self):
        with pytest.raises(ValueError, match="n >= 2"):
            fit_gaussian(np.zeros((1, 3)))

    def test_shrinkage_inflates_diagonal(self):
        feats = np.random.default_rng(10).standard_normal((20, 3))
        g0 = fit_gaussian(feats)
        g1 = fit_gaussian(feats, shrinkage=0.5)
        assert (np.diag(g1.cov) > np.diag(g0.cov)).all()


class TestFeatureExtractor:
    def test_unknown_backend(self):
        with pytest.raises(ValueError, match="backend"):
            FeatureExtractor(backend="vgg")

    def test_inception_unavailable_names_fallback(self):
        with pytest.raises(BackendUnavailableError, match="proxy"):
            FeatureExtractor(backend="inception_v3_external")

    def test_identity_flattens(self):
        x = np.arange(24.0).reshape(2, 3, 4)
        feats = FeatureExtractor(backend="identity").extract(x)
        assert feats.shape == (2, 12)
        assert (feats[1] == x[1].ravel()).all()

    def test_proxy_shape_and_determinism(self):
        rng = np.random.default_rng(11)
        imgs = rng.random((3, 16, 16))
        ex = FeatureExtractor(backend="proxy_embedder", output_dim=32)
        f1, f2 = ex.extract(imgs), ex.extract(imgs)
        assert f1.shape == (3, 32)
        assert (f1 == f2).all()


class TestFidProtocol:
    def setup_method(self):
        self.rng = np.random.default_rng(12)
        self.ref = ring_samples(self.rng, 4000)
        self.ex = FeatureExtractor(backend="identity")

    def test_resampler_beats_split_half_null(self):
        def gen(n):
            return self.ref[self.rng.integers(len(self.ref), size=n)]

        score, row = fid_protocol(gen, self.ref, self.ex, n=4000)
        baseline = split_half_baseline(self.ref, self.ex,
                                       np.random.default_rng(13))
        assert score < baseline
        assert row["n"] == 4000 and row["extractor"] == "identity"

    def test_constant_generator_scores_far_above_null(self):
        def gen(n):
            return np.zeros((n, 2))

        score, _ = fid_protocol(gen, self.ref, self.ex, n=1000)
        baseline = split_half_baseline(self.ref, self.ex,
                                       np.random.default_rng(14))
        assert score > 10 * baseline

    def test_order_invariance(self):
        perm = np.random.default_rng(15).permutation(len(self.ref))

        def gen(n):
            return self.ref[:n]

        s1, _ = fid_protocol(gen, self.ref, self.ex, n=1000)
        s2, _ = fid_protocol(gen, self.ref[perm], self.ex, n=1000)
        assert s1 == pytest.approx(s2, abs=1e-8)

    def test_split_half_null_shrinks_with_n(self):
        big = ring_samples(np.random.default_rng(16), 10_000)
        scores = []
        for n in (500, 2000, 5000):
            vals = [split_half_baseline(big[:n], self.ex,
                                        np.random.default_rng(17 + r))
                    for r in range(5)]
            scores.append(np.median(vals))
        assert scores[0] > scores[1] > scores[2]

    def test_ill_conditioned_guard_and_shrinkage_escape(self):
        ref = np.random.default_rng(18).standard_normal((40, 5, 5))

        def gen(n):
            return ref[:n]

        with pytest.raises(ValueError, match="shrinkage"):
            fid_protocol(gen, ref, self.ex, n=10)
        score, _ = fid_protocol(gen, ref, self.ex, n=10, shrinkage=0.1)
        assert np.isfinite(score)


class TestToyDivergence:
    def test_identical_sets_zero(self):
        pts = ring_samples(np.random.default_rng(19), 500)
        fd, counts = toy_divergence(pts, pts)
        assert fd < 1e-10
        assert counts.sum() == 500

    def test_translation_lower_bound(self):
        pts = ring_samples(np.random.default_rng(20), 2000)
        delta = 3.0
        fd, _ = toy_divergence(pts + [delta, 0.0], pts)
        assert fd >= delta**2

    def test_missing_mode_flags_one_empty_bin(self):
        modes = ring_modes()
        rng = np.random.default_rng(21)
        ref = ring_samples(rng, 4000, modes)
        broken = ring_samples(rng, 4000, modes, skip_mode=3)
        _, counts = toy_divergence(broken, ref, mode_centers=modes)
        assert (counts == 0).sum() == 1
        assert counts[3] == 0

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError, match="2-D"):
            toy_divergence(np.zeros((5, 3)), np.zeros((5, 3)))

    def test_mode_counts_nearest_center(self):
        modes = ring_modes()
        counts = mode_counts(modes + 0.01, modes)
        assert (counts == 1).all()
