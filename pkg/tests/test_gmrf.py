import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import kstest, multivariate_normal, norm

from twistsmc import gmrf as GM
from twistsmc import smc


def car_16(tau=0.1, d=1.0):
    return GM.build_car(GM.CarConfig(edges=GM.lattice_edges(4, 4), tau=tau, d=d), size=16)


def exact_gaussian_marginal(g, sigma, y):
    cov = np.linalg.inv(g.precision) + sigma**2 * np.eye(g.size)
    return multivariate_normal(mean=g.mean, cov=cov).logpdf(y)


class TestBuildCar:
    def test_two_node_path(self):
        g = GM.build_car(GM.CarConfig(edges=[(0, 1)], tau=1.0, d=1.0))
        assert np.allclose(g.precision, [[2.0, -1.0], [-1.0, 2.0]])

    def test_four_cycle(self):
        edges = [(0, 1), (1, 2), (2, 3), (3, 0)]
        g = GM.build_car(GM.CarConfig(edges=edges, tau=1.0, d=1.0))
        assert np.allclose(np.diag(g.precision), 3.0)
        assert np.sum(g.precision == -1.0) == 8

    def test_lattice_spd(self):
        g = GM.build_car(GM.CarConfig(edges=GM.lattice_edges(8, 8), tau=0.1, d=1.0), size=64)
        np.linalg.cholesky(g.precision)

    def test_self_loop_rejected(self):
        with pytest.raises(GM.AsymmetricAdjacency):
            GM.build_car(GM.CarConfig(edges=[(0, 0)]))

    def test_tau_conventions(self):
        a = GM.build_car(GM.CarConfig(edges=[(0, 1)], tau=0.1, d=1.0))
        b = GM.build_car(
            GM.CarConfig(edges=[(0, 1)], tau=0.1, d=1.0, tau_convention="precision-scale")
        )
        assert np.allclose(a.precision, b.precision / 0.01)

    def test_adjacency_file_roundtrip(self, tmp_path):
        path = tmp_path / "adj.txt"
        path.write_text("1 2\n2 3\n")
        edges = GM.load_adjacency(path)
        assert edges == [(0, 1), (1, 2)]


class TestObsModels:
    @pytest.mark.parametrize(
        "obs,y",
        [
            (GM.BinomialLogitObs(10), 7.0),
            (GM.PoissonLogObs(), 3.0),
            (GM.GaussianObs(0.8), 0.4),
        ],
    )
    def test_derivatives_match_finite_differences(self, obs, y):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, 50)
        h = 1e-5
        d1_fd = (obs.log_density(x + h, y) - obs.log_density(x - h, y)) / (2 * h)
        d2_fd = (obs.d1(x + h, y) - obs.d1(x - h, y)) / (2 * h)
        assert np.max(np.abs(obs.d1(x, y) - d1_fd) / np.maximum(np.abs(d1_fd), 1e-3)) <= 1e-6
        assert np.max(np.abs(obs.d2(x, y) - d2_fd) / np.maximum(np.abs(d2_fd), 1e-3)) <= 1e-5
        assert np.all(obs.d2(x, y) <= 0)

    def test_density_max_binomial(self):
        obs = GM.BinomialLogitObs(10)
        x = np.linspace(-8, 8, 2001)
        for y in (0.0, 3.0, 10.0):
            grid_max = np.max(obs.log_density(x, y))
            assert obs.log_density_max(np.array([y]))[0] >= grid_max - 1e-9


class TestLaplaceFit:
    def test_gaussian_single_iteration_exact(self):
        g = car_16()
        obs = GM.GaussianObs(0.7)
        _, y = GM.simulate_car_data(g, obs, seed=1)
        la = GM.laplace_fit(g, obs, y)
        assert la.iterations == 1
        post_prec = g.precision + np.eye(16) / 0.7**2
        post_mean = np.linalg.solve(post_prec, g.precision @ g.mean + y / 0.7**2)
        assert np.max(np.abs(la.mode - post_mean)) <= 1e-10
        assert GM.approx_loglik(la) == pytest.approx(
            exact_gaussian_marginal(g, 0.7, y), abs=1e-8
        )

    def test_binomial_symmetric_single_site(self):
        g = GM.make_gmrf(np.zeros(1), np.ones((1, 1)))
        obs = GM.BinomialLogitObs(10)
        la = GM.laplace_fit(g, obs, np.array([5.0]))
        assert abs(la.mode[0]) <= 1e-10

    def test_binomial_chain_matches_newton_oracle(self):
        g = GM.make_gmrf(np.zeros(2), np.array([[2.0, -1.0], [-1.0, 2.0]]))
        obs = GM.BinomialLogitObs(10)
        y = np.array([3.0, 9.0])
        la = GM.laplace_fit(g, obs, y)

        def grad(x):
            return -(g.precision @ (x - g.mean)) + obs.d1(x, y)

        x = np.zeros(2)
        h = 1e-6
        for _ in range(60):
            gx = grad(x)
            hess = np.empty((2, 2))
            for k in range(2):
                e = np.zeros(2)
                e[k] = h
                hess[:, k] = (grad(x + e) - grad(x - e)) / (2 * h)
            x = x - np.linalg.solve(hess, gx)
        assert np.max(np.abs(la.mode - x)) <= 1e-8

    def test_mode_gradient_with_fd_crosscheck(self):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=5)
        la = GM.laplace_fit(g, obs, y)
        grad = GM._posterior_gradient(g, obs, y, la.mode)
        assert np.max(np.abs(grad)) <= 1e-6

        def logpost(x):
            return float(
                -0.5 * (x - g.mean) @ (g.precision @ (x - g.mean))
                + np.sum(obs.log_density(x, y))
            )

        h = 1e-5
        probe = la.mode + 0.3
        fd = np.empty(16)
        for k in range(16):
            e = np.zeros(16)
            e[k] = h
            fd[k] = (logpost(probe + e) - logpost(probe - e)) / (2 * h)
        analytic = GM._posterior_gradient(g, obs, y, probe)
        assert np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3)) <= 1e-4

    def test_no_convergence_carries_last_iterate(self):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=2)
        with pytest.raises(GM.NoConvergence) as info:
            GM.laplace_fit(g, obs, y, tol=0.0, grad_tol=0.0, max_iter=2)
        assert info.value.last.mode.shape == (16,)


class TestApproxLoglik:
    def test_single_site_binomial_vs_quadrature(self):
        prec = 1.0
        g = GM.make_gmrf(np.zeros(1), np.array([[prec]]))
        obs = GM.BinomialLogitObs(10)
        y = np.array([8.0])
        la = GM.laplace_fit(g, obs, y)

        def integrand(x):
            return math.exp(float(obs.log_density(np.array([x]), 8.0)[0])) * norm.pdf(
                x, 0.0, 1.0
            )

        exact = math.log(quad(integrand, -12, 12, limit=200)[0])
        assert abs(GM.approx_loglik(la) - exact) <= 0.05

    def test_deterministic(self):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=3)
        la = GM.laplace_fit(g, obs, y)
        assert GM.approx_loglik(la) == GM.approx_loglik(la)


class TestConditionals:
    def test_first_step_is_marginal(self):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=7)
        la = GM.laplace_fit(g, obs, y)
        m, v = GM.conditional_gaussian(la, 0, np.empty((1, 0)))
        cov = np.linalg.inv(la.precision_tilde)
        assert m == pytest.approx(la.mode[0], abs=1e-10)
        assert v == pytest.approx(cov[0, 0], abs=1e-10)

    def test_single_site(self):
        g = GM.make_gmrf(np.zeros(1), np.array([[4.0]]))
        obs = GM.GaussianObs(1.0)
        la = GM.laplace_fit(g, obs, np.array([0.3]))
        m, v = GM.conditional_gaussian(la, 0, np.empty((1, 0)))
        assert v == pytest.approx(1.0 / la.precision_tilde[0, 0])

    def test_matches_dense_schur(self):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=9)
        la = GM.laplace_fit(g, obs, y)
        cov = np.linalg.inv(la.precision_tilde)
        rng = np.random.default_rng(1)
        for t in (1, 5, 11, 15):
            hist = rng.normal(size=(3, t))
            m, v = GM.conditional_gaussian(la, t, hist)
            w = np.linalg.solve(cov[:t, :t], cov[t, :t])
            m_ref = la.mode[t] + (hist - la.mode[:t]) @ w
            v_ref = cov[t, t] - cov[t, :t] @ w
            assert np.max(np.abs(m - m_ref)) <= 1e-8
            assert abs(v - v_ref) <= 1e-8

    def test_prior_conditional_matches_dense(self):
        g = car_16()
        cond = GM.SequentialConditionals(g.precision, g.mean)
        cov = np.linalg.inv(g.precision)
        rng = np.random.default_rng(2)
        t = 6
        hist = rng.normal(size=(4, t))
        w = np.linalg.solve(cov[:t, :t], cov[t, :t])
        m_ref = g.mean[t] + (hist - g.mean[:t]) @ w
        assert np.max(np.abs(cond.cond_mean(t, hist) - m_ref)) <= 1e-8

    def test_chain_joint_factorization(self):
        g = car_16()
        cond = GM.SequentialConditionals(g.precision, g.mean)
        pts = np.random.default_rng(3).normal(size=(5, 16))
        ref = multivariate_normal(mean=g.mean, cov=np.linalg.inv(g.precision)).logpdf(pts)
        assert np.max(np.abs(cond.log_joint(pts) - ref)) <= 1e-8

    def test_sampler_matches_density(self):
        g = car_16()
        cond = GM.SequentialConditionals(g.precision, g.mean)
        rng = np.random.default_rng(4)
        hist = np.tile(rng.normal(size=(1, 3)), (20_000, 1))
        xs = cond.sample(3, hist, rng)
        m = cond.cond_mean(3, hist[:1])[0]
        sd = cond.sd[3]
        assert kstest(xs, lambda q: norm.cdf(q, m, sd)).pvalue > 1e-3


class TestSequentialModels:
    def test_gaussian_obs_constant_weights_any_n(self):
        g = car_16()
        obs = GM.GaussianObs(0.5)
        _, y = GM.simulate_car_data(g, obs, seed=11)
        la = GM.laplace_fit(g, obs, y)
        exact = exact_gaussian_marginal(g, 0.5, y)
        model, prop = GM.twisted_gmrf_model(g, obs, y, la)
        for n in (1, 7, 64):
            res = smc.run_smc(model, prop, smc.SmcConfig(n_particles=n, seed=n))
            assert abs(res.log_Z_hat - exact) <= 1e-8
            spread = np.ptp(res.particles.log_weights_unnorm, axis=1)
            assert np.max(spread) <= 1e-8

    def test_binomial_weight_positivity(self):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=13)
        la = GM.laplace_fit(g, obs, y)
        model, prop = GM.twisted_gmrf_model(g, obs, y, la)
        res = smc.run_smc(model, prop, smc.SmcConfig(n_particles=256, seed=0))
        assert np.all(np.isfinite(res.particles.log_weights_unnorm))

    def test_bootstrap_single_site_unbiased_vs_quadrature(self):
        g = GM.make_gmrf(np.zeros(1), np.array([[1.0]]))
        obs = GM.BinomialLogitObs(10)
        y = np.array([8.0])
        model, prop = GM.bootstrap_gmrf_model(g, obs, y)

        def integrand(x):
            return math.exp(float(obs.log_density(np.array([x]), 8.0)[0])) * norm.pdf(x)

        exact = math.log(quad(integrand, -12, 12, limit=200)[0])
        runs = np.array(
            [
                smc.run_smc(model, prop, smc.SmcConfig(n_particles=4000, seed=s)).log_Z_hat
                for s in range(12)
            ]
        )
        vals = np.exp(runs - exact)
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean() - 1.0) <= 3 * se

    def test_bootstrap_noisier_than_twisted(self):
        g = car_16()
        obs = GM.GaussianObs(0.6)
        _, y = GM.simulate_car_data(g, obs, seed=17)
        la = GM.laplace_fit(g, obs, y)
        tw_model, tw_prop = GM.twisted_gmrf_model(g, obs, y, la)
        bs_model, bs_prop = GM.bootstrap_gmrf_model(g, obs, y)
        tw, bs = [], []
        for s in range(200):
            tw.append(smc.run_smc(tw_model, tw_prop, smc.SmcConfig(n_particles=32, seed=s)).log_Z_hat)
            bs.append(smc.run_smc(bs_model, bs_prop, smc.SmcConfig(n_particles=32, seed=s)).log_Z_hat)
        assert np.var(bs, ddof=1) > np.var(tw, ddof=1)

    def test_bootstrap_prior_conditional_is_schur(self):
        g = car_16()
        model, _ = GM.bootstrap_gmrf_model(g, GM.BinomialLogitObs(10), np.zeros(16))
        cov = np.linalg.inv(g.precision)
        t = 9
        hist = np.random.default_rng(5).normal(size=(2, t))
        w = np.linalg.solve(cov[:t, :t], cov[t, :t])
        ref = g.mean[t] + (hist - g.mean[:t]) @ w
        assert np.max(np.abs(model.prior.cond_mean(t, hist) - ref)) <= 1e-8

    def test_ordering_invariance_gaussian_exactness(self):
        g = car_16()
        obs = GM.GaussianObs(0.9)
        _, y = GM.simulate_car_data(g, obs, seed=19)
        exact = exact_gaussian_marginal(g, 0.9, y)
        rng = np.random.default_rng(6)
        for _ in range(3):
            perm = list(rng.permutation(16))
            gp = GM.permute_gmrf(g, perm)
            yp = y[perm]
            la = GM.laplace_fit(gp, obs, yp)
            model, prop = GM.twisted_gmrf_model(gp, obs, yp, la)
            res = smc.run_smc(model, prop, smc.SmcConfig(n_particles=8, seed=3))
            assert abs(res.log_Z_hat - exact) <= 1e-8


class TestRegularized:
    def build(self, epsilon, seed=23):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=seed)
        la = GM.laplace_fit(g, obs, y)
        return GM.regularized_car_model(g, obs, y, la, epsilon), g, obs, y, la

    def test_epsilon_zero_weights_are_obs_ratio_up_to_constants(self):
        reg, g, obs, y, la = self.build(0.0)
        psi = GM.LaplaceTwisting(g, obs, y, la)
        rng = np.random.default_rng(0)
        paths = np.cumsum(rng.normal(size=(8, 5)), axis=1) * 0.1
        t = 4
        got = reg.log_weight(t, paths)
        expect = (
            obs.log_density(paths[:, t], y[t])
            - la.log_obs_tilde(t, paths[:, t])
            - psi._mode_inc[t]
        )
        assert np.max(np.abs(got - expect)) <= 1e-10

    def test_certificate_detects_bad_delta(self):
        g = car_16()
        obs = GM.BinomialLogitObs(10)
        _, y = GM.simulate_car_data(g, obs, seed=29)
        la = GM.laplace_fit(g, obs, y)
        from twistsmc.twist import UncertifiedSafeguard

        prior = GM.SequentialConditionals(g.precision, g.mean)
        safeguard = GM.GaussianConditionalProposal(prior)
        psi = GM.LaplaceTwisting(g, obs, y, la)

        def log_factor_prod(t, paths):
            return prior.log_density(t, paths[:, t], paths[:, :t]) + obs.log_density(
                paths[:, t], y[t]
            )

        with pytest.raises(UncertifiedSafeguard):
            from twistsmc.twist import regularize

            regularize(
                psi,
                0.01,
                safeguard,
                1e6,  # absurd delta: certificate must fail
                twisted_proposal=GM.GaussianConditionalProposal(la.conditionals),
                log_factor_prod=log_factor_prod,
                log_approx_factor_prod=log_factor_prod,
                T=16,
            )

    def test_estimates_agree_with_unregularized(self):
        reg, g, obs, y, la = self.build(0.01)
        model, prop = GM.twisted_gmrf_model(g, obs, y, la)
        plain = np.array(
            [
                smc.run_smc(model, prop, smc.SmcConfig(n_particles=512, seed=s)).log_Z_hat
                for s in range(20)
            ]
        )
        regd = np.array(
            [
                smc.run_smc(reg.model, reg.proposal, smc.SmcConfig(n_particles=512, seed=s)).log_Z_hat
                for s in range(20)
            ]
        )
        se = math.hypot(plain.std(ddof=1), regd.std(ddof=1)) / math.sqrt(20)
        assert abs(plain.mean() - regd.mean()) <= 4 * se

    def test_mixture_proposal_density_matches_samples(self):
        reg, g, obs, y, la = self.build(0.5)
        rng = np.random.default_rng(8)
        hist = np.tile(rng.normal(size=(1, 2)) * 0.2, (20_000, 1))
        xs = reg.proposal.sample(2, hist, rng)
        grid = np.linspace(xs.min() - 1, xs.max() + 1, 400)
        dens = np.exp(
            reg.proposal.log_density(2, grid, np.tile(hist[:1], (400, 1)))
        )
        cdf = np.cumsum(dens)
        cdf /= cdf[-1]
        ks = kstest(xs, lambda q: np.interp(q, grid, cdf))
        assert ks.pvalue > 1e-3
