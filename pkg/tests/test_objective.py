import math

import numpy as np
import pytest

from esihge import autodiff as ad
from esihge import evaluate as ev
from esihge import geometry as geo
from esihge import graphio as gio
from esihge import model as mdl
from esihge import objective as obj
from esihge import train as tr
from esihge.autodiff import DomainError, Tensor

from conftest import finite_difference


def toy(n=6, m=4, seed=0, **hp_kwargs):
    rng = np.random.default_rng(seed)
    edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [0, 5], [1, 4]])
    g = gio.Graph(x=rng.random((n, m)), edges=edges)
    defaults = dict(k_mix=2, j_samples=1, gamma=1.0, c=1.0, latent=3,
                    hidden=4, noise_dim=2, t_widths=(8, 6), seed=seed)
    defaults.update(hp_kwargs)
    hp = obj.HyperParams(**defaults)
    a_hat = gio.normalize_adjacency(g.adjacency())
    phi, tnet = tr.init_params(g.m, hp, seed=seed)
    return g, hp, a_hat, phi, tnet


class TestReconLoglik:
    def test_perfect_logits_saturate_to_zero(self):
        adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
        logits = np.where(adj > 0, 20.0, -20.0)
        np.fill_diagonal(logits, 0.0)
        out = obj.recon_loglik(adj, ad.constant(logits))
        assert -1e-6 < out.item() < 0

    def test_zero_logits_give_log_half_terms(self):
        adj = np.zeros((4, 4))
        adj[0, 1] = adj[1, 0] = 1.0
        out = obj.recon_loglik(adj, ad.constant(np.zeros((4, 4))), w_pos=1.0)
        assert out.item() == pytest.approx(math.log(0.5), rel=1e-12)

    def test_matches_brute_force_pair_sum(self):
        rng = np.random.default_rng(0)
        adj = np.array([[0, 1, 1], [1, 0, 0], [1, 0, 0]], dtype=float)
        logits = rng.standard_normal((3, 3))
        logits = (logits + logits.T) / 2
        w = obj.positive_weight(3, 2)
        out = obj.recon_loglik(adj, ad.constant(logits))

        def sig(v):
            return 1.0 / (1.0 + math.exp(-v))

        total = 0.0
        for i in range(3):
            for j in range(3):
                if i == j:
                    continue
                if adj[i, j] > 0:
                    total += w * math.log(sig(logits[i, j]))
                else:
                    total += math.log(1.0 - sig(logits[i, j]))
        assert out.item() == pytest.approx(total / 6.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        adj = np.array([[0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 0],
                        [1, 0, 0, 0]], dtype=float)
        logits = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        ad.backward(obj.recon_loglik(adj, logits))
        analytic = logits.grad.copy()

        def f():
            with ad.no_grad():
                return obj.recon_loglik(adj, logits).item()

        (numeric,) = finite_difference(f, [logits])
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-9)


class TestLogHk:
    def _psis(self, n=5, f=2, k=2, seed=0, c=1.0):
        rng = np.random.default_rng(seed)
        mk = lambda: mdl.PosteriorParams(
            mu=geo.project_to_ball(rng.standard_normal((n, f)) * 0.3, c),
            sigma=ad.constant(rng.uniform(0.5, 1.5, (n, f))))
        return mk(), [mk() for _ in range(k)]

    def test_k0_equals_single_logpdf(self):
        psi0, _ = self._psis(k=0)
        rng = np.random.default_rng(1)
        z, _ = mdl.sample_z(psi0, 1.0, rng)
        got = obj.log_hk(z, psi0, [], 1.0)
        want = geo.wrapped_normal_logpdf(z, psi0.mu, psi0.sigma, 1.0)
        np.testing.assert_allclose(got.data, want.data, atol=1e-14)

    def test_identical_components_collapse(self):
        psi0, _ = self._psis(k=0)
        rng = np.random.default_rng(2)
        z, _ = mdl.sample_z(psi0, 1.0, rng)
        got = obj.log_hk(z, psi0, [psi0, psi0, psi0], 1.0)
        want = geo.wrapped_normal_logpdf(z, psi0.mu, psi0.sigma, 1.0)
        np.testing.assert_allclose(got.data, want.data, atol=1e-12)

    def test_matches_brute_force_mixture(self):
        psi0, extras = self._psis(k=2, seed=3)
        rng = np.random.default_rng(4)
        z, _ = mdl.sample_z(psi0, 1.0, rng)
        got = obj.log_hk(z, psi0, extras, 1.0).data[:, 0]
        dens = [np.exp(geo.wrapped_normal_logpdf(z, p.mu, p.sigma, 1.0).data[:, 0])
                for p in (psi0, *extras)]
        want = np.log(np.mean(dens, axis=0))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_mixture_bounds(self):
        psi0, extras = self._psis(k=3, seed=5)
        rng = np.random.default_rng(6)
        z, _ = mdl.sample_z(psi0, 1.0, rng)
        hk = obj.log_hk(z, psi0, extras, 1.0).data[:, 0]
        comps = np.stack(
            [geo.wrapped_normal_logpdf(z, p.mu, p.sigma, 1.0).data[:, 0]
             for p in (psi0, *extras)])
        assert np.all(hk <= comps.max(axis=0) + 1e-12)
        assert np.all(hk >= comps[0] - math.log(4) - 1e-12)


class TestSurrogateProperties:
    def test_near_prior_posterior_cancels(self):
        g, hp, a_hat, phi, _ = toy(k_mix=0, j_samples=1)
        for t in phi.tensors():
            t.data = t.data * 1e-3  # posterior hugs the prior
        rng = np.random.default_rng(7)
        adj = g.adjacency_dense()
        diffs = []
        with ad.no_grad():
            for _ in range(1000):
                s = obj.draw_step_samples(a_hat, g.x, phi, hp, rng)
                _, prior, ent = obj.sivi_surrogate_terms(adj, s, hp.c)
                diffs.append(prior.item() + ent.item())
        diffs = np.array(diffs)
        se = diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert abs(diffs.mean()) < 3 * se + 1e-5

    def test_bk_estimator_nonnegative_in_expectation(self):
        g, hp, a_hat, phi, _ = toy(k_mix=4, j_samples=1, seed=8)
        rng = np.random.default_rng(9)
        vals = []
        with ad.no_grad():
            for _ in range(1000):
                s = obj.draw_step_samples(a_hat, g.x, phi, hp, rng)
                z = s.zs[0]
                lq = ad.tsum(geo.wrapped_normal_logpdf(
                    z, s.psi0.mu, s.psi0.sigma, hp.c)).item()
                lh = ad.tsum(obj.log_hk(z, s.psi0, s.psi_extras, hp.c)).item()
                vals.append(lq - lh)
        vals = np.array(vals)
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert vals.mean() >= -3 * se

    def test_surrogate_nondecreasing_in_k(self):
        # paired draws: the K=1 mixture uses the first auxiliary draw of the
        # K=10 mixture, so recon and prior cancel exactly in the difference
        g, hp, a_hat, phi, _ = toy(k_mix=10, j_samples=1, seed=10)
        rng = np.random.default_rng(11)
        diffs = []
        with ad.no_grad():
            for _ in range(1000):
                s = obj.draw_step_samples(a_hat, g.x, phi, hp, rng)
                z = s.zs[0]
                lh1 = ad.tsum(obj.log_hk(z, s.psi0, s.psi_extras[:1], hp.c)).item()
                lh10 = ad.tsum(obj.log_hk(z, s.psi0, s.psi_extras, hp.c)).item()
                diffs.append(lh1 - lh10)  # surrogate_10 - surrogate_1
        diffs = np.array(diffs)
        se = diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert diffs.mean() >= -3 * se


class TestFStar:
    def test_value_at_one(self):
        assert obj.f_star(1.0) == pytest.approx(1.0, rel=1e-15)

    def test_value_at_zero(self):
        assert obj.f_star(0.0) == pytest.approx(math.exp(-1.0), rel=1e-15)

    def test_convexity_midpoints(self):
        rng = np.random.default_rng(12)
        a, b = rng.uniform(-3, 3, (2, 100))
        mid = obj.f_star((a + b) / 2)
        assert np.all(mid <= (obj.f_star(a) + obj.f_star(b)) / 2 + 1e-12)

    def test_tensor_path(self):
        t = Tensor([0.0, 1.0, 2.0])
        np.testing.assert_allclose(obj.f_star(t).data,
                                   np.exp(np.array([-1.0, 0.0, 1.0])), rtol=1e-15)


class TestMiDualBound:
    def _constant_critic(self, tnet, value):
        for t in tnet.weights + tnet.biases:
            t.data = np.zeros_like(t.data)
        tnet.biases[-1].data = np.array([[value]])

    def test_constant_one_gives_zero(self):
        g, hp, a_hat, phi, tnet = toy(seed=13)
        self._constant_critic(tnet, 1.0)
        psi = mdl.sample_psi(a_hat, g.x, phi, hp.c, np.random.default_rng(0))
        z, _ = mdl.sample_z(psi, hp.c, np.random.default_rng(1))
        bound = obj.mi_dual_bound(g.x, psi, z, tnet, hp.c,
                                  np.random.default_rng(2).permutation(g.n))
        assert abs(bound.item()) < 1e-12

    @pytest.mark.parametrize("t_const", [-1.0, 0.5, 2.0])
    def test_constant_critic_closed_form(self, t_const):
        g, hp, a_hat, phi, tnet = toy(seed=14)
        self._constant_critic(tnet, t_const)
        psi = mdl.sample_psi(a_hat, g.x, phi, hp.c, np.random.default_rng(0))
        z, _ = mdl.sample_z(psi, hp.c, np.random.default_rng(1))
        bound = obj.mi_dual_bound(g.x, psi, z, tnet, hp.c,
                                  np.random.default_rng(2).permutation(g.n))
        expected = t_const - math.exp(t_const - 1.0)
        assert bound.item() == pytest.approx(expected, rel=1e-12)
        assert expected <= 0.0  # maximized at t = 1

    def test_single_node_rejected(self):
        g, hp, a_hat, phi, tnet = toy(seed=15)
        psi = mdl.sample_psi(a_hat, g.x, phi, hp.c, np.random.default_rng(0))
        z, _ = mdl.sample_z(psi, hp.c, np.random.default_rng(1))
        one = mdl.PosteriorParams(mu=ad.constant(psi.mu.data[:1]),
                                  sigma=ad.constant(psi.sigma.data[:1]))
        with pytest.raises(DomainError):
            obj.mi_dual_bound(g.x[:1], one, ad.constant(z.data[:1]), tnet,
                              hp.c, np.array([0]))

    def test_independent_data_bound_near_zero(self):
        # trained f* bound on independent pairs stays at chance level
        rng = np.random.default_rng(16)
        x = rng.standard_normal(1000)
        z = rng.standard_normal(1000)
        est = ev.dv_mutual_information(x, z, steps=400, lr=3e-4, seed=0,
                                       hidden=(32, 16), bound="fstar")
        assert est <= 0.05

    def test_fstar_bound_recovers_gaussian_mi(self):
        # 2-D correlated Gaussian pairs with known MI = -0.5 log(1 - rho^2)
        rho = 0.9
        true_mi = -0.5 * math.log(1 - rho ** 2)
        rng = np.random.default_rng(17)
        x = rng.standard_normal(2000)
        z = rho * x + math.sqrt(1 - rho ** 2) * rng.standard_normal(2000)
        est = ev.dv_mutual_information(x, z, steps=2000, lr=3e-4, seed=1,
                                       hidden=(64, 32), bound="fstar")
        assert 0.6 * true_mi <= est <= true_mi + 0.05


class TestTotalLoss:
    def test_gamma_zero_reduces_to_surrogate(self):
        g, hp, a_hat, phi, tnet = toy(gamma=0.0, seed=18)
        rng = np.random.default_rng(19)
        adj = g.adjacency_dense()
        with ad.no_grad():
            total, bd, _ = obj.total_loss(a_hat, g.x, adj, phi, tnet, hp, rng)
        assert bd.mi_bound == 0.0
        assert bd.total == pytest.approx(bd.recon + bd.prior + bd.entropy_surrogate,
                                         rel=1e-12)

    def test_breakdown_identity(self):
        g, hp, a_hat, phi, tnet = toy(gamma=0.7, seed=20)
        rng = np.random.default_rng(21)
        adj = g.adjacency_dense()
        with ad.no_grad():
            total, bd, _ = obj.total_loss(a_hat, g.x, adj, phi, tnet, hp, rng)
        assert bd.total == pytest.approx(
            bd.recon + bd.prior + bd.entropy_surrogate + hp.gamma * bd.mi_bound,
            rel=1e-12)
        assert total.item() == pytest.approx(bd.total, rel=1e-12)

    def test_finite_for_wild_parameters(self):
        g, hp, a_hat, phi, tnet = toy(seed=22)
        for t in phi.tensors() + tnet.tensors():
            t.data = t.data * 40.0
        tr._project_ball_params(tnet, hp.c)
        rng = np.random.default_rng(23)
        adj = g.adjacency_dense()
        with ad.no_grad():
            total, bd, _ = obj.total_loss(a_hat, g.x, adj, phi, tnet, hp, rng)
        assert math.isfinite(bd.total)

    def test_full_gradient_matches_finite_differences(self):
        # 5-node graph, F=2, K=1, J=1, frozen noise, every parameter
        rng = np.random.default_rng(24)
        n, m = 5, 3
        edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [0, 4]])
        g = gio.Graph(x=rng.random((n, m)), edges=edges)
        hp = obj.HyperParams(k_mix=1, j_samples=1, gamma=1.0, c=1.0, latent=2,
                             hidden=3, noise_dim=2, t_widths=(6, 4), seed=0)
        a_hat = gio.normalize_adjacency(g.adjacency())
        phi, tnet = tr.init_params(g.m, hp, seed=1)
        adj = g.adjacency_dense()
        us = [rng.standard_normal((n, hp.latent))]
        eps_list = [mdl.draw_noise(rng, n, hp.noise_dim) for _ in range(2)]
        params = phi.tensors() + tnet.tensors()

        def forward():
            srng = np.random.default_rng(99)  # fixes the permutation
            samples = obj.draw_step_samples(a_hat, g.x, phi, hp, srng,
                                            us=us, eps_list=eps_list)
            total, _, _ = obj.total_loss(a_hat, g.x, adj, phi, tnet, hp, srng,
                                         samples=samples)
            return total

        ad.backward(forward())
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                    for t in params]

        def f():
            with ad.no_grad():
                return forward().item()

        numeric = finite_difference(f, params)
        for a, nmr in zip(analytic, numeric):
            np.testing.assert_allclose(a, nmr, rtol=1e-4, atol=1e-8)

    def test_flat_limit_nests_euclidean_gvae(self):
        # gamma=0, K=0, c->0: the step value must match a hand-written
        # Euclidean Gaussian VAE evaluated on the same noise, under the
        # flat-limit correspondence z = mu + sigma*u/2 and density argument
        # 2(z - mu) (the conformal factor at the origin is 2)
        rng = np.random.default_rng(25)
        n, m, f = 6, 4, 2
        edges = np.array([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [0, 3]])
        g = gio.Graph(x=rng.random((n, m)), edges=edges)
        hp = obj.HyperParams(k_mix=0, j_samples=1, gamma=0.0, c=1e-8, latent=f,
                             hidden=3, noise_dim=2, t_widths=(4,), seed=2)
        a_hat = gio.normalize_adjacency(g.adjacency())
        phi, tnet = tr.init_params(g.m, hp, seed=3)
        adj = g.adjacency_dense()
        u = rng.standard_normal((n, f))
        eps = mdl.draw_noise(rng, n, hp.noise_dim)

        with ad.no_grad():
            samples = obj.draw_step_samples(a_hat, g.x, phi, hp,
                                            np.random.default_rng(0),
                                            us=[u], eps_list=[eps])
            total, bd, _ = obj.total_loss(a_hat, g.x, adj, phi, tnet, hp,
                                          np.random.default_rng(0),
                                          samples=samples)

        # independent Euclidean reference on raw numpy
        ahat_d = a_hat.to_dense()
        h1 = np.maximum(ahat_d @ g.x @ phi.w1.data, 0.0)
        mu = ahat_d @ np.concatenate([h1, eps], axis=1) @ phi.w_mu.data
        sigma = np.exp(np.clip(ahat_d @ h1 @ phi.w_sigma.data,
                               math.log(1e-4), math.log(1e2)))
        z = mu + sigma * u / 2.0
        logits = z @ z.T
        w_pos = obj.positive_weight(n, g.num_edges)
        sig = 1.0 / (1.0 + np.exp(-logits))
        off = ~np.eye(n, dtype=bool)
        recon = np.sum((w_pos * adj * np.log(sig)
                        + (1 - adj) * np.log(1 - sig))[off]) / (n * n - n)

        def gauss_logpdf(v, scale):
            return -0.5 * np.sum((v / scale) ** 2 + np.log(2 * np.pi)
                                 + 2 * np.log(scale), axis=1)

        prior = gauss_logpdf(2 * z, np.ones_like(z)).sum()
        entropy = -gauss_logpdf(2 * (z - mu), sigma).sum()
        assert bd.total == pytest.approx(recon + prior + entropy, abs=1e-4)
