import numpy as np
import pytest
import torch

from vcdm.aux_denoiser import (
    AuxModelConfig,
    AuxPrior,
    AuxTransformer,
    standardization_stats,
    train_aux,
)
from vcdm import diffusion_core


def toy_cfg(d=8):
    return AuxModelConfig(data_dim=d, token_dim=32, num_layers=2, num_heads=4)


def gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class TestForward:
    @pytest.mark.parametrize("b", [1, 7, 64])
    def test_output_shape(self, b):
        net = AuxTransformer(toy_cfg(), seed=0)
        x = torch.randn(b, 8, generator=gen(1))
        out = net(x, torch.full((b,), 0.3))
        assert out.shape == (b, 8)

    def test_token_count(self):
        # unconditional, no aug: sigma + embedding + query = 3 tokens
        # with class and aug labels: 5
        cfg = AuxModelConfig(data_dim=4, token_dim=16, num_layers=1, num_heads=2,
                             class_count=3, aug_label_dim=4)
        net = AuxTransformer(cfg, seed=0)
        x = torch.randn(2, 4, generator=gen(0))
        out = net(x, torch.tensor([0.1, 0.2]), class_id=torch.tensor([0, 1]),
                  aug_label=torch.zeros(2, 4))
        assert out.shape == (2, 4)

    def test_class_id_out_of_range(self):
        cfg = AuxModelConfig(data_dim=4, token_dim=16, num_layers=1, num_heads=2,
                             class_count=2)
        net = AuxTransformer(cfg, seed=0)
        with pytest.raises(ValueError, match="range"):
            net(torch.zeros(1, 4), torch.tensor([0.1]), class_id=torch.tensor([5]))

    def test_cond_token_changes_output(self):
        cfg = AuxModelConfig(data_dim=4, token_dim=16, num_layers=1, num_heads=2,
                             class_count=2)
        net = AuxTransformer(cfg, seed=3)
        x = torch.randn(1, 4, generator=gen(2))
        out_null = net(x, torch.tensor([0.5]))
        out_c0 = net(x, torch.tensor([0.5]), class_id=torch.tensor([0]))
        assert not torch.equal(out_null, out_c0)

    def test_batch_order_invariance(self):
        net = AuxTransformer(toy_cfg(), seed=0).double()
        x = torch.randn(5, 8, dtype=torch.float64, generator=gen(3))
        c = torch.rand(5, dtype=torch.float64, generator=gen(4))
        out = net(x, c)
        perm = torch.tensor([3, 1, 4, 0, 2])
        out_perm = net(x[perm], c[perm])
        assert torch.allclose(out[perm], out_perm, atol=1e-10)

    def test_finite_difference_jacobian(self):
        net = AuxTransformer(toy_cfg(d=4), seed=0).double()
        model = diffusion_core.precondition(net, 1.0)
        sigma = 0.7
        g = gen(5)
        for trial in range(10):
            x = torch.randn(1, 4, dtype=torch.float64, generator=g)
            v = torch.randn(1, 4, dtype=torch.float64, generator=g)
            x_ = x.clone().requires_grad_(True)
            out = model(x_, sigma)
            jvp = torch.autograd.grad(out, x_, grad_outputs=v)[0]
            h = 1e-6
            fd = torch.zeros_like(x)
            for j in range(4):
                xp, xm = x.clone(), x.clone()
                xp[0, j] += h
                xm[0, j] -= h
                fd[0, j] = ((model(xp, sigma) - model(xm, sigma)) * v).sum() / (2 * h)
            rel = (jvp - fd).norm() / fd.norm()
            assert rel < 1e-3


class TestStandardization:
    def test_roundtrip(self):
        x = np.random.default_rng(0).standard_normal((50, 6)) * 3 + 1
        mean, std = standardization_stats(x)
        prior = AuxPrior(None, mean, std, toy_cfg(6))
        back = prior.destandardize(prior.standardize(x))
        assert np.abs(back - x).max() < 1e-6

    def test_constant_dim_safe(self):
        x = np.zeros((10, 3))
        x[:, 0] = np.arange(10)
        mean, std = standardization_stats(x)
        assert std[1] == 1.0 and std[2] == 1.0


class TestTraining:
    def test_overfit_approaches_bayes_floor(self):
        # On 3 standardized points the best possible loss is the Bayes risk of
        # the posterior-mean denoiser (computable in closed form for a
        # discrete data distribution), roughly 17% of the initial loss here,
        # so "overfit to ~zero" is not attainable; we check convergence to
        # within 1.5x of that floor instead.
        emb = np.array([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]])
        cfg = AuxModelConfig(data_dim=3, token_dim=32, num_layers=2, num_heads=4)
        prior, rows = train_aux(emb, cfg, rng_seed=0, steps=3000, lr=2e-3,
                                batch_size=8)
        floor = self._bayes_floor(emb)
        first = np.median([r[1] for r in rows[:100]])
        last = np.median([r[1] for r in rows[-200:]])
        assert last < 1.5 * floor
        assert last < 0.3 * first

    @staticmethod
    def _bayes_floor(emb, n=50_000):
        from vcdm.diffusion_core import LossWeighting, sample_train_sigma

        mean, std = standardization_stats(emb)
        z = torch.as_tensor((emb - mean) / std)
        w = LossWeighting(sigma_data=float(z.pow(2).mean().sqrt()))
        g = gen(0)
        sig = sample_train_sigma(w, g, (n,))
        x = z[torch.randint(len(z), (n,), generator=g)]
        xs = x + sig[:, None] * torch.randn(n, z.shape[1], dtype=torch.float64, generator=g)
        d2 = ((xs[:, None, :] - z[None]) ** 2).sum(-1)
        pw = torch.softmax(-d2 / (2 * sig[:, None] ** 2), dim=1)
        xhat = pw @ z
        return (w.weight(sig) * ((x - xhat) ** 2).sum(-1)).mean().item()

    def test_lr_zero_params_unchanged(self):
        emb = np.random.default_rng(1).standard_normal((10, 4))
        cfg = AuxModelConfig(data_dim=4, token_dim=16, num_layers=1, num_heads=2)
        net = AuxTransformer(cfg, seed=0)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        from vcdm.training import train_loop
        den = diffusion_core.precondition(net, 1.0)
        train_loop(den, torch.as_tensor(emb, dtype=torch.float32),
                   diffusion_core.LossWeighting(sigma_data=1.0),
                   steps=100, lr=0.0, batch_size=4, seed=0)
        after = net.state_dict()
        for k in before:
            assert torch.equal(before[k], after[k])

    def test_seeded_loss_curves_identical(self):
        emb = np.random.default_rng(2).standard_normal((20, 4))
        cfg = AuxModelConfig(data_dim=4, token_dim=16, num_layers=1, num_heads=2)
        _, rows1 = train_aux(emb, cfg, rng_seed=7, steps=50)
        _, rows2 = train_aux(emb, cfg, rng_seed=7, steps=50)
        assert rows1 == rows2


@pytest.fixture(scope="module")
def cluster_prior():
    rng = np.random.default_rng(0)
    c0 = rng.standard_normal((100, 2)) * 0.1 + np.array([3.0, 0.0])
    c1 = rng.standard_normal((100, 2)) * 0.1 + np.array([-3.0, 0.0])
    emb = np.concatenate([c0, c1])
    cfg = AuxModelConfig(data_dim=2, token_dim=32, num_layers=2, num_heads=4)
    prior, _ = train_aux(emb, cfg, rng_seed=0, steps=1500, lr=1e-3,
                         batch_size=64, ema_decay=0.99)
    return prior


class TestSampling:

    def test_deterministic_given_seed(self, cluster_prior):
        s1 = cluster_prior.sample_embedding(gen(3), count=4)
        s2 = cluster_prior.sample_embedding(gen(3), count=4)
        assert np.array_equal(s1, s2)

    def test_cluster_coverage(self, cluster_prior):
        samples = cluster_prior.sample_embedding(gen(4), count=1000)
        centers = np.array([[3.0, 0.0], [-3.0, 0.0]])
        radius = 0.1 * np.sqrt(2)  # per-cluster spread
        d = np.linalg.norm(samples[:, None, :] - centers[None], axis=2).min(axis=1)
        assert (d < 3 * radius).mean() >= 0.95

    def test_class_conditional_coverage(self):
        rng = np.random.default_rng(1)
        c0 = rng.standard_normal((100, 2)) * 0.1 + np.array([3.0, 0.0])
        c1 = rng.standard_normal((100, 2)) * 0.1 + np.array([-3.0, 0.0])
        emb = np.concatenate([c0, c1])
        labels = np.array([0] * 100 + [1] * 100)
        cfg = AuxModelConfig(data_dim=2, token_dim=32, num_layers=2, num_heads=4,
                             class_count=2)
        prior, _ = train_aux(emb, cfg, rng_seed=0, steps=1500, lr=1e-3,
                             batch_size=64, ema_decay=0.99, class_ids=labels)
        samples = prior.sample_embedding(gen(5), count=200, class_id=0)
        near0 = np.linalg.norm(samples - np.array([3.0, 0.0]), axis=1) < 1.0
        assert near0.mean() >= 0.95
