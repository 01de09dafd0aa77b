import numpy as np
import pytest
from conftest import grid_posterior_oracle, random_mixture_prior

from cebmf import NormalMeansInput
from cebmf.ebnm import (
    ExponentialSlab,
    MixturePrior,
    NormalSlab,
    _em_weights,
    component_log_marginals,
    default_scale_grid,
    nm_fit_constant_prior,
    nm_loglik,
    nm_neg_kl,
    nm_posterior,
    quadrature_loglik,
)

SPIKE_NORMAL = MixturePrior(pi0=1.0, slabs=(NormalSlab(0.0, 1.0),), weights=(0.0,))


class TestMixturePrior:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            MixturePrior(pi0=0.5, slabs=(NormalSlab(),), weights=(0.6,))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            MixturePrior(pi0=1.2, slabs=(NormalSlab(),), weights=(-0.2,))

    def test_positive_scales_required(self):
        with pytest.raises(ValueError):
            NormalSlab(0.0, 0.0)
        with pytest.raises(ValueError):
            ExponentialSlab(-1.0)


class TestNmLoglik:
    def test_pure_spike_standard_normal(self):
        assert nm_loglik(0.0, 1.0, SPIKE_NORMAL) == pytest.approx(-0.9189385332046727)

    def test_conjugate_convolution(self):
        prior = MixturePrior(pi0=0.0, slabs=(NormalSlab(0.0, 3.0),), weights=(1.0,))
        # N(0; 0, 1+3): -0.5*log(2*pi*4)
        assert nm_loglik(0.0, 1.0, prior) == pytest.approx(-1.6120857137646181)

    def test_mixture_instance_matches_quadrature(self):
        prior = MixturePrior(pi0=0.3, slabs=(NormalSlab(0.0, 2.0),), weights=(0.7,))
        closed = nm_loglik(1.2, 0.5, prior)
        assert closed == pytest.approx(quadrature_loglik(1.2, 0.5, prior), abs=1e-8)

    def test_nonpositive_s_rejected(self):
        with pytest.raises(ValueError):
            nm_loglik(1.0, 0.0, SPIKE_NORMAL)

    def test_infinite_s_contributes_zero(self):
        vals = nm_loglik(np.array([1.0, 2.0]), np.array([1.0, np.inf]), SPIKE_NORMAL)
        assert vals[1] == 0.0

    @pytest.mark.parametrize("family", ["normal", "exp", "point_normal"])
    def test_matches_quadrature_randomized(self, family):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(200):
            s = float(rng.uniform(0.3, 2.0))
            beta_hat = float(rng.normal(0, 2.0))
            prior = random_mixture_prior(rng, family, s_floor=s, beta_scale=2.5)
            closed = nm_loglik(beta_hat, s, prior)
            worst = max(worst, abs(closed - quadrature_loglik(beta_hat, s, prior)))
        assert worst < 1e-6


class TestNmPosterior:
    def test_normal_conjugacy(self):
        prior = MixturePrior(pi0=0.0, slabs=(NormalSlab(0.0, 1.0),), weights=(1.0,))
        post = nm_posterior(2.0, 1.0, prior)
        assert post.mean == pytest.approx(1.0)
        assert post.second == pytest.approx(1.5)

    def test_symmetric_prior_at_zero(self):
        prior = MixturePrior(pi0=0.4, slabs=(NormalSlab(0.0, 2.0),), weights=(0.6,))
        assert nm_posterior(0.0, 1.0, prior).mean == pytest.approx(0.0)

    def test_exponential_instance_matches_grid_oracle(self):
        prior = MixturePrior(pi0=0.5, slabs=(ExponentialSlab(1.0),), weights=(0.5,))
        post = nm_posterior(0.8, 0.6, prior)
        # trapezoid integration on [0, beta_hat + 10 s], 1e6 points
        t = np.linspace(0.0, 0.8 + 10 * 0.6, 10**6)
        s = 0.6
        lik = np.exp(-0.5 * np.log(2 * np.pi * s * s) - (0.8 - t) ** 2 / (2 * s * s))
        dens = 0.5 * lik * np.exp(-t)
        spike_mass = 0.5 * np.exp(-0.5 * np.log(2 * np.pi * s * s) - 0.8**2 / (2 * s * s))
        Z = spike_mass + np.trapezoid(dens, t)
        assert post.mean == pytest.approx(np.trapezoid(t * dens, t) / Z, abs=1e-6)
        assert post.second == pytest.approx(np.trapezoid(t * t * dens, t) / Z, abs=1e-6)

    def test_second_at_least_mean_squared(self):
        rng = np.random.default_rng(5)
        for family in ["normal", "exp"]:
            for _ in range(200):
                s = float(rng.uniform(0.2, 3.0))
                prior = random_mixture_prior(rng, family, s_floor=s, beta_scale=3.0)
                post = nm_posterior(float(rng.normal(0, 3)), s, prior)
                assert post.second >= post.mean**2 - 1e-12
                assert 0.0 <= post.prob_nonzero <= 1.0

    def test_exponential_posterior_nonnegative(self):
        prior = MixturePrior(pi0=0.2, slabs=(ExponentialSlab(0.7),), weights=(0.8,))
        post = nm_posterior(np.array([-8.0, -1.0, 0.0, 3.0]), np.ones(4), prior)
        assert np.all(post.mean >= 0)

    def test_shrinkage_preserves_sign_zero_mean_slabs(self):
        prior = MixturePrior(pi0=0.3, slabs=(NormalSlab(0.0, 2.0),), weights=(0.7,))
        rng = np.random.default_rng(17)
        bh = rng.normal(0, 3, 300)
        post = nm_posterior(bh, np.ones(300), prior)
        assert np.all(post.mean * bh >= 0)
        assert np.all(np.abs(post.mean) <= np.abs(bh) + 1e-12)

    def test_infinite_s_returns_prior_moments(self):
        prior = MixturePrior(pi0=0.5, slabs=(ExponentialSlab(2.0),), weights=(0.5,))
        post = nm_posterior(123.0, np.inf, prior)
        assert post.mean == pytest.approx(0.5 * 2.0)
        assert post.second == pytest.approx(0.5 * 8.0)

    def test_extreme_arguments_stable(self):
        # far-negative truncated-normal arguments exercise the erfcx path
        prior = MixturePrior(pi0=0.0, slabs=(ExponentialSlab(0.01),), weights=(1.0,))
        post = nm_posterior(np.array([-30.0, 30.0]), np.array([1.0, 1.0]), prior)
        assert np.all(np.isfinite(post.mean))
        assert np.all(post.second >= post.mean**2)


class TestNegKl:
    def test_never_positive_and_zero_for_uninformative(self):
        rng = np.random.default_rng(23)
        for family in ["normal", "exp"]:
            prior = random_mixture_prior(rng, family, s_floor=0.5, beta_scale=2.0)
            bh = rng.normal(0, 2, 50)
            s = np.concatenate([rng.uniform(0.5, 2.0, 45), np.full(5, np.inf)])
            ll = nm_loglik(bh, s, prior)
            post = nm_posterior(bh, s, prior)
            term = nm_neg_kl(bh, s, ll, post)
            assert np.all(term <= 1e-10)
            assert np.all(term[45:] == 0.0)

    def test_matches_grid_kl(self):
        # direct -KL(q||g) by dense integration on the slab part plus the
        # discrete spike atom
        prior = MixturePrior(pi0=0.35, slabs=(NormalSlab(0.0, 1.7),), weights=(0.65,))
        bh, s = 1.1, 0.8
        ll = nm_loglik(bh, s, prior)
        post = nm_posterior(bh, s, prior)
        term = float(nm_neg_kl(np.array([bh]), np.array([s]), np.array([ll]), post)[0])

        t = np.linspace(-15, 15, 2_000_001)
        log_lik = -0.5 * (np.log(2 * np.pi * s * s) + (bh - t) ** 2 / (s * s))
        g_slab = 0.65 * np.exp(-0.5 * (np.log(2 * np.pi * 1.7) + t * t / 1.7))
        q_slab = g_slab * np.exp(log_lik - ll)
        spike_lik = np.exp(-0.5 * (np.log(2 * np.pi * s * s) + bh * bh / (s * s)))
        q_spike = 0.35 * spike_lik / np.exp(ll)
        with np.errstate(divide="ignore", invalid="ignore"):
            integrand = np.where(q_slab > 0, q_slab * np.log(g_slab / q_slab), 0.0)
        expected = np.trapezoid(integrand, t) + q_spike * np.log(0.35 / q_spike)
        assert term == pytest.approx(expected, abs=1e-7)


class TestDefaultScaleGrid:
    def test_geometric_ladder(self):
        grid = default_scale_grid(np.array([4.0, -1.0]), np.array([1.0, 2.0]))
        assert grid[0] == pytest.approx(0.1)
        ratios = grid[1:] / grid[:-1]
        assert np.all(ratios <= np.sqrt(2.0) + 1e-12)
        assert len(grid) <= 20

    def test_caps_at_max_components(self):
        bh = np.array([1e5])
        grid = default_scale_grid(bh, np.array([1e-3]))
        assert len(grid) == 20
        assert grid[-1] == pytest.approx(2e5)


class TestFitConstantPrior:
    def test_null_data_mostly_spike(self):
        rng = np.random.default_rng(42)
        inp = NormalMeansInput(beta_hat=rng.normal(0, 1, 5000), s=np.ones(5000))
        for family in ["point_normal", "normal_mix", "exp_mix"]:
            prior = nm_fit_constant_prior(inp, family)
            assert prior.pi0 >= 0.9, family

    def test_single_observation_spike_boundary(self):
        inp = NormalMeansInput(beta_hat=[0.0], s=[1.0])
        prior = nm_fit_constant_prior(inp, "point_normal")
        fitted = nm_loglik(0.0, 1.0, prior)
        assert fitted == pytest.approx(-0.9189385332046727, abs=1e-6)

    def test_em_step_is_mean_responsibility(self):
        # one EM step from uniform weights equals normalized mean responsibilities
        rng = np.random.default_rng(0)
        bh = rng.normal(0, 2, 40)
        s = np.ones(40)
        slabs = (NormalSlab(0.0, 1.0), NormalSlab(0.0, 4.0))
        lm = component_log_marginals(slabs, bh, s)
        w1, _ = _em_weights(lm, max_iter=1)
        scored = lm - np.log(lm.shape[1])
        resp = np.exp(scored - np.logaddexp.reduce(scored, axis=1)[:, None])
        np.testing.assert_allclose(w1, resp.mean(axis=0) / resp.mean(axis=0).sum(), rtol=1e-12)

    def test_em_monotone(self):
        rng = np.random.default_rng(9)
        bh = np.concatenate([rng.normal(0, 1, 300), rng.normal(0, 3, 200)])
        s = np.ones(500)
        slabs = (NormalSlab(0.0, 0.5), NormalSlab(0.0, 2.0), NormalSlab(0.0, 8.0))
        lm = component_log_marginals(slabs, bh, s)
        _, trace = _em_weights(lm, max_iter=200)
        diffs = np.diff(trace)
        assert np.all(diffs >= -1e-9)

    def test_signal_recovery(self):
        rng = np.random.default_rng(1)
        beta = np.concatenate([np.zeros(2000), rng.normal(0, 3, 2000)])
        inp = NormalMeansInput(beta_hat=beta + rng.normal(0, 1, 4000), s=np.ones(4000))
        prior = nm_fit_constant_prior(inp, "normal_mix")
        assert 0.3 <= prior.pi0 <= 0.7

    def test_all_infinite_s_warns_spike_only(self):
        inp = NormalMeansInput(beta_hat=[0.0, 0.0], s=[np.inf, np.inf])
        with pytest.warns(UserWarning):
            prior = nm_fit_constant_prior(inp, "normal_mix")
        assert prior.pi0 == 1.0

    def test_warm_start_same_grid(self):
        rng = np.random.default_rng(2)
        inp = NormalMeansInput(beta_hat=rng.normal(0, 2, 500), s=np.ones(500))
        first = nm_fit_constant_prior(inp, "normal_mix")
        again = nm_fit_constant_prior(inp, "normal_mix", init=first)
        assert [sl.variance for sl in again.slabs] == [sl.variance for sl in first.slabs]

    def test_warm_start_never_decreases_loglik(self):
        rng = np.random.default_rng(3)
        inp = NormalMeansInput(beta_hat=rng.normal(0, 2, 400), s=np.ones(400))
        first = nm_fit_constant_prior(inp, "exp_mix", max_iter=3)
        before = nm_loglik(inp.beta_hat, inp.s, first).sum()
        second = nm_fit_constant_prior(inp, "exp_mix", init=first, max_iter=3)
        after = nm_loglik(inp.beta_hat, inp.s, second).sum()
        assert after >= before - 1e-9


class TestQuadrature:
    def test_gh_self_consistency_normal_slabs(self):
        rng = np.random.default_rng(19)
        worst = 0.0
        for _ in range(100):
            s = float(rng.uniform(0.3, 2.0))
            sd = float(rng.uniform(0.5 * s, 3.0))
            prior = MixturePrior(pi0=0.0, slabs=(NormalSlab(float(rng.normal()), sd**2),), weights=(1.0,))
            bh = float(rng.normal(0, 2))
            worst = max(worst, abs(nm_loglik(bh, s, prior) - quadrature_loglik(bh, s, prior)))
        assert worst < 1e-8

    def test_point_mass_only_exact(self):
        val = quadrature_loglik(1.3, 0.7, MixturePrior(pi0=1.0, slabs=(), weights=()))
        expected = -0.5 * (np.log(2 * np.pi * 0.49) + 1.3**2 / 0.49)
        assert val == pytest.approx(expected, abs=1e-14)

    def test_exponential_slab_matches_closed_form(self):
        prior = MixturePrior(pi0=0.0, slabs=(ExponentialSlab(1.0),), weights=(1.0,))
        assert quadrature_loglik(0.0, 1.0, prior) == pytest.approx(
            nm_loglik(0.0, 1.0, prior), abs=1e-7
        )

    def test_min_node_count(self):
        with pytest.raises(ValueError):
            quadrature_loglik(0.0, 1.0, SPIKE_NORMAL, n_nodes=8)


class TestPosteriorVsGridOracle:
    @pytest.mark.parametrize("family", ["normal", "exp"])
    def test_randomized(self, family):
        rng = np.random.default_rng(29)
        for _ in range(40):
            s = float(rng.uniform(0.3, 1.5))
            prior = random_mixture_prior(rng, family, s_floor=s, beta_scale=2.0)
            bh = float(rng.normal(0, 1.5))
            post = nm_posterior(bh, s, prior)
            om, os2, opnz = grid_posterior_oracle(bh, s, prior)
            scale = max(1.0, abs(om), os2)
            assert abs(post.mean - om) / scale < 1e-5
            assert abs(post.second - os2) / scale < 1e-5
            assert abs(post.prob_nonzero - opnz) < 1e-5
