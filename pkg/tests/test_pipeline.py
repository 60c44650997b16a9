import types

import numpy as np
import pytest
import torch

from vcdm import diffusion_core
from vcdm.embedding_space import KMeansCodebook
from vcdm.image_denoiser import ImageModelConfig, build_raw_net
from vcdm.pipeline import (
    ConfigurationError,
    SamplingPlan,
    class_cond_sample,
    derive_seed,
    edm_direct_sample,
    oracle_sample,
    sample_batch,
    timing_report,
    vcdm_sample,
)
from vcdm.toys import ring_modes


def image_model(y_dim=0, seed=0, **kw):
    args = dict(mode="mlp2d", y_dim=y_dim,
                regime="y_cond" if y_dim else "uncond",
                mlp_hidden=32, mlp_layers=2, emb_width=32)
    args.update(kw)
    cfg = ImageModelConfig(**args)
    net = build_raw_net(cfg, seed=seed)
    return diffusion_core.precondition(net, 1.0)


class StubDenoiser(torch.nn.Module):
    """Image-model stand-in whose denoiser is an arbitrary function; keeps
    pipeline tests independent of training."""

    def __init__(self, cfg, fn):
        super().__init__()
        self.raw_net = types.SimpleNamespace(cfg=cfg)
        self.fn = fn

    def forward(self, x, sigma, **cond):
        return self.fn(x, sigma, cond)


class PointMassPrior:
    """Stage-1 stand-in that always emits the same embedding."""

    def __init__(self, y):
        self.y = np.asarray(y, dtype=np.float64)
        self.cfg = types.SimpleNamespace(data_dim=self.y.shape[0])

    def sample_embedding(self, rng, count=1, **kw):
        return np.tile(self.y, (count, 1))


def fast_plan(method, count, seed, **kw):
    return SamplingPlan(
        method=method, count=count, seed=seed,
        stage2_schedule=diffusion_core.ScheduleConfig(num_steps=6), **kw)


class TestPlan:
    def test_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            SamplingPlan(method="gan", count=1, seed=0)

    def test_count_positive(self):
        with pytest.raises(ValueError, match="count"):
            SamplingPlan(method="vcdm", count=0, seed=0)

    def test_stage_defaults(self):
        plan = SamplingPlan(method="vcdm", count=1, seed=0)
        assert plan.stage1_schedule.num_steps == 64
        assert plan.stage2_schedule.num_steps == 40
        assert plan.stage1_sampler.s_churn == 0.0


class TestSeedSplit:
    def test_no_collisions_over_1e6_streams(self):
        seeds = set()
        for item in range(250_000):
            for stage in ("stage1", "stage2"):
                seeds.add(derive_seed(0, item, stage))
                seeds.add(derive_seed(1, item, stage))
        assert len(seeds) == 1_000_000

    def test_items_never_share_streams(self):
        assert derive_seed(7, 0, "stage1") != derive_seed(7, 1, "stage1")
        assert derive_seed(7, 0, "stage1") != derive_seed(7, 0, "stage2")

    def test_positive_int64(self):
        s = derive_seed(123, 456, "pick")
        assert 0 <= s < 2**63


class TestVcdmSample:
    def test_determinism_and_discard(self):
        prior = PointMassPrior([1.0, -1.0, 0.5])
        model = image_model(y_dim=3)
        plan = fast_plan("vcdm", 4, 11)
        b1 = vcdm_sample(plan, prior, model)
        b2 = vcdm_sample(plan, prior, model)
        assert b1.shape == (4, 2)
        assert (b1 == b2).all()

    def test_debug_returns_embeddings(self):
        prior = PointMassPrior([1.0, -1.0, 0.5])
        model = image_model(y_dim=3)
        plan = fast_plan("vcdm", 3, 11, debug=True)
        imgs, ys = vcdm_sample(plan, prior, model)
        assert ys.shape == (3, 3)
        assert (ys == prior.y).all()

    def test_point_mass_prior_matches_oracle_bitwise(self):
        y = np.array([0.3, -0.7])
        prior = PointMassPrior(y)
        model = image_model(y_dim=2)
        plan = fast_plan("vcdm", 5, 42)
        via_prior = vcdm_sample(plan, prior, model)
        via_oracle = oracle_sample(plan, model, y[None])
        assert (via_prior == via_oracle).all()

    def test_dimension_mismatch_names_both_checkpoints(self):
        prior = PointMassPrior([0.0, 0.0, 0.0])
        model = image_model(y_dim=2)
        with pytest.raises(ConfigurationError, match="aux.ckpt.*img.ckpt"):
            vcdm_sample(fast_plan("vcdm", 1, 0), prior, model,
                        stage1_name="aux.ckpt", stage2_name="img.ckpt")

    def test_different_seeds_differ(self):
        prior = PointMassPrior([1.0, -1.0])
        model = image_model(y_dim=2)
        b1 = vcdm_sample(fast_plan("vcdm", 2, 1), prior, model)
        b2 = vcdm_sample(fast_plan("vcdm", 2, 2), prior, model)
        assert not (b1 == b2).all()


class TestOracleSample:
    def test_count_equals_dataset_uses_each_once(self):
        emb = np.arange(12.0).reshape(6, 2)
        model = image_model(y_dim=2)
        plan = fast_plan("vcdm_oracle", 6, 3, debug=True)
        _, used = oracle_sample(plan, model, emb)
        assert sorted(map(tuple, used)) == sorted(map(tuple, emb))

    def test_over_count_draws_with_replacement(self):
        emb = np.arange(4.0).reshape(2, 2)
        model = image_model(y_dim=2)
        plan = fast_plan("vcdm_oracle", 7, 3, debug=True)
        imgs, used = oracle_sample(plan, model, emb)
        assert imgs.shape == (7, 2) and used.shape == (7, 2)

    def test_class_filter(self):
        emb = np.arange(8.0).reshape(4, 2)
        cls = np.array([0, 0, 1, 1])
        model = image_model(y_dim=2)
        plan = fast_plan("vcdm_oracle", 2, 5, a=1, debug=True)
        _, used = oracle_sample(plan, model, emb, class_ids=cls)
        assert set(map(tuple, used)) <= set(map(tuple, emb[2:]))

    def test_no_matching_class(self):
        model = image_model(y_dim=2)
        plan = fast_plan("vcdm_oracle", 1, 0, a=9)
        with pytest.raises(ValueError, match="class 9"):
            oracle_sample(plan, model, np.zeros((3, 2)),
                          class_ids=np.zeros(3, dtype=int))


class TestClassCondSample:
    def make_codebook(self, k):
        return KMeansCodebook(centroids=np.arange(2.0 * k).reshape(k, 2))

    def zero_model(self, y_dim):
        cfg = ImageModelConfig(mode="mlp2d", y_dim=y_dim, regime="cluster_cond")
        return StubDenoiser(cfg, lambda x, s, c: torch.zeros_like(x))

    def test_distribution_size_mismatch(self):
        plan = fast_plan("class_cond", 1, 0)
        with pytest.raises(ValueError, match="3 entries"):
            class_cond_sample(plan, self.zero_model(4), self.make_codebook(4),
                              [0.5, 0.25, 0.25])

    def test_frequencies_match_categorical(self):
        k = 4
        probs = np.array([0.1, 0.2, 0.3, 0.4])
        plan = fast_plan("class_cond", 10_000, 8, debug=True)
        _, cids = class_cond_sample(plan, self.zero_model(k),
                                    self.make_codebook(k), probs)
        counts = np.bincount(cids, minlength=k)
        bound = 3 * np.sqrt(10_000 * probs * (1 - probs))
        assert (np.abs(counts - 10_000 * probs) <= bound).all()

    def test_single_cluster_degenerates_to_constant_conditioning(self):
        plan = fast_plan("class_cond", 5, 1, debug=True)
        _, cids = class_cond_sample(plan, self.zero_model(1),
                                    self.make_codebook(1), [1.0])
        assert (cids == 0).all()

    def test_seeded_determinism(self):
        plan = fast_plan("class_cond", 6, 9)
        model = image_model(y_dim=3)
        cb = self.make_codebook(3)
        b1 = class_cond_sample(plan, model, cb, [0.2, 0.3, 0.5])
        b2 = class_cond_sample(plan, model, cb, [0.2, 0.3, 0.5])
        assert (b1 == b2).all()


class TestDispatchAndEdm:
    def test_edm_rejects_conditional_model(self):
        with pytest.raises(ConfigurationError, match="y_dim"):
            edm_direct_sample(fast_plan("edm_direct", 1, 0), image_model(y_dim=2))

    def test_edm_direct_runs(self):
        out = edm_direct_sample(fast_plan("edm_direct", 3, 0), image_model())
        assert out.shape == (3, 2)

    def test_dispatch_missing_requirements(self):
        plan = fast_plan("vcdm", 1, 0)
        with pytest.raises(ConfigurationError, match="image model"):
            sample_batch(plan)
        with pytest.raises(ConfigurationError, match="stage-1"):
            sample_batch(plan, image_model=image_model(y_dim=2))
        with pytest.raises(ConfigurationError, match="dataset"):
            sample_batch(fast_plan("vcdm_oracle", 1, 0),
                         image_model=image_model(y_dim=2))
        with pytest.raises(ConfigurationError, match="codebook"):
            sample_batch(fast_plan("class_cond", 1, 0),
                         image_model=image_model(y_dim=2))

    def test_dispatch_vcdm_equals_direct_call(self):
        prior = PointMassPrior([0.1, 0.2])
        model = image_model(y_dim=2)
        plan = fast_plan("vcdm", 2, 4)
        assert (sample_batch(plan, aux_prior=prior, image_model=model)
                == vcdm_sample(plan, prior, model)).all()


class TestBayesStubEndToEnd:
    """Plumbing check with ideal components: a stage-1 prior drawing uniform
    mode one-hots and a stage-2 denoiser that decodes the one-hot to its ring
    mode. Every mode must be hit at the categorical rate."""

    class UniformModePrior:
        def __init__(self, k):
            self.cfg = types.SimpleNamespace(data_dim=k)
            self.k = k

        def sample_embedding(self, rng, count=1, **kw):
            ids = torch.randint(self.k, (count,), generator=rng)
            return np.eye(self.k)[ids.numpy()]

    def test_mode_coverage(self):
        modes = torch.as_tensor(ring_modes(), dtype=torch.float32)
        cfg = ImageModelConfig(mode="mlp2d", y_dim=8, regime="y_cond")

        def fn(x, sigma, cond):
            return cond["y"] @ modes

        model = StubDenoiser(cfg, fn)
        plan = fast_plan("vcdm", 400, 17)
        out = vcdm_sample(plan, self.UniformModePrior(8), model)
        d2 = ((out[:, None, :] - modes.numpy()[None]) ** 2).sum(-1)
        counts = np.bincount(d2.argmin(1), minlength=8)
        assert (counts >= 0.05 * 400).all()


class TestTimingReport:
    def test_overhead_fraction_and_ordering(self):
        from vcdm.aux_denoiser import AuxModelConfig, AuxPrior, AuxTransformer

        acfg = AuxModelConfig(data_dim=2, token_dim=16, num_layers=1, num_heads=2)
        prior = AuxPrior(
            diffusion_core.precondition(AuxTransformer(acfg, seed=0), 1.0),
            mean=np.zeros(2), std=np.ones(2), cfg=acfg)
        big = image_model(y_dim=2, seed=1, mlp_hidden=256, mlp_layers=6)
        n_aux = sum(p.numel() for p in prior.denoiser.parameters())
        n_img = sum(p.numel() for p in big.parameters())
        assert n_img >= 10 * n_aux
        plan = SamplingPlan(
            method="vcdm", count=1, seed=0,
            stage1_schedule=diffusion_core.ScheduleConfig(num_steps=8),
            stage2_schedule=diffusion_core.ScheduleConfig(num_steps=40))
        rep = timing_report(plan, prior, big, n_items=5)
        assert 0.0 < rep["overhead_fraction"] < 1.0
        assert rep["stage1_ms"] < rep["stage2_ms"]
