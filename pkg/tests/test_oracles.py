"""Closed-form mixture oracles against independent routes."""
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from tfguide.errors import CapabilityError, ConfigError, InputError, SingularTimeError
from tfguide.losses import ComponentLogLoss, QuadraticTarget
from tfguide.oracles import (MixtureModel, eps_prediction, exact_guidance_grad,
                             exact_guidance_quadrature, finite_diff_grad,
                             marginal_log_density, posterior_cov, posterior_cov_moments,
                             posterior_mean, posterior_mean_direct, score, score_hessian)
from tfguide.rng import stream


class TestMixtureModel:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            MixtureModel([0.5, 0.6], [[0.0], [1.0]], [1.0, 1.0])

    def test_variances_positive(self):
        with pytest.raises(ConfigError):
            MixtureModel([1.0], [[0.0]], [0.0])

    def test_means_share_dimension(self):
        with pytest.raises((ConfigError, ValueError)):
            MixtureModel([0.5, 0.5], [[0.0], [1.0, 2.0]], [1.0, 1.0])

    def test_json_round_trip(self, mix_2d):
        back = MixtureModel.from_json(mix_2d.to_json())
        assert_array_equal(back.weights, mix_2d.weights)
        assert_array_equal(back.means, mix_2d.means)
        assert_array_equal(back.variances, mix_2d.variances)
        assert set(mix_2d.to_dict()) == {"weights", "means", "variances"}

    def test_sample_moments(self, mix_2d):
        x, labels = mix_2d.sample(200_000, stream(0, "t"))
        assert_allclose(np.bincount(labels) / labels.size, mix_2d.weights, atol=5e-3)
        assert_allclose(x.mean(axis=0), mix_2d.mean(), atol=0.02)
        assert_allclose(np.cov(x.T), mix_2d.covariance(), atol=0.03)


class TestMarginal:
    def test_single_gaussian_value(self):
        sch = SimpleNamespace(alpha=np.array([1.0, 0.5]), sigma=np.sqrt([0.0, 0.5]))
        m = MixtureModel.single([0.0], 1.0)
        assert_allclose(marginal_log_density(m, sch, 1, [0.0]), -0.5 * np.log(2 * np.pi), atol=1e-12)

    def test_t0_is_prior(self, bimodal_1d, quarter):
        x = np.array([0.7])
        prior = np.log(0.5 * stats.norm.pdf(0.7, -2, 1) + 0.5 * stats.norm.pdf(0.7, 2, 1))
        assert_allclose(marginal_log_density(bimodal_1d, quarter, 0, x), prior, rtol=1e-12)

    def test_against_quadrature(self, bimodal_1d, quarter):
        a = 0.25
        for x in (-1.3, 0.0, 0.4, 2.2):
            def integrand(x0):
                p0 = 0.5 * stats.norm.pdf(x0, -2, 1) + 0.5 * stats.norm.pdf(x0, 2, 1)
                return p0 * stats.norm.pdf(x, np.sqrt(a) * x0, np.sqrt(1 - a))
            ref, _ = integrate.quad(integrand, -30, 30, epsabs=1e-14, epsrel=1e-12)
            assert_allclose(marginal_log_density(bimodal_1d, quarter, 2, [x]), np.log(ref), atol=1e-8)

    def test_dimension_mismatch(self, mix_2d, quarter):
        with pytest.raises(InputError):
            marginal_log_density(mix_2d, quarter, 1, [1.0, 2.0, 3.0])

    def test_batch_matches_pointwise(self, mix_2d, linear):
        x = stream(1).normal(size=(5, 2))
        batch = marginal_log_density(mix_2d, linear, 300, x)
        single = [marginal_log_density(mix_2d, linear, 300, xi) for xi in x]
        assert_allclose(batch, single, rtol=0, atol=0)


class TestScore:
    def test_symmetry_point(self, gauss_1d, quarter):
        assert_allclose(score(gauss_1d, quarter, 2, [1.0]), [0.0], atol=1e-15)

    def test_closed_form(self, gauss_1d, quarter):
        assert_allclose(score(gauss_1d, quarter, 2, [2.0]), [-1.0], rtol=1e-14)

    def test_eps_parameterisation(self, mix_2d, linear):
        x = np.array([0.3, -0.4])
        assert_allclose(eps_prediction(mix_2d, linear, 500, x),
                        -linear.sigma[500] * score(mix_2d, linear, 500, x))

    def test_finite_difference_probes(self, mix_2d, linear):
        rng = stream(2, "probes")
        worst = 0.0
        for k in range(100):
            t = int(rng.integers(1, 1000))
            x = rng.normal(0, 2, 2)
            fd = finite_diff_grad(lambda z: marginal_log_density(mix_2d, linear, t, z), x, 1e-5)
            s = score(mix_2d, linear, t, x)
            worst = max(worst, np.linalg.norm(fd - s) / max(np.linalg.norm(s), 1e-3))
        assert worst <= 1e-5

    def test_hessian_against_fd_of_score(self, mix_2d, linear):
        x = np.array([0.2, 0.9])
        H = score_hessian(mix_2d, linear, 200, x)
        fd = np.stack([finite_diff_grad(lambda z: score(mix_2d, linear, 200, z)[i], x, 1e-5)
                       for i in range(2)])
        assert_allclose(H, fd, atol=1e-7)


class TestPosterior:
    def test_linear_gaussian_mean(self, gauss_1d, quarter):
        assert_allclose(posterior_mean(gauss_1d, quarter, 2, [2.0]), [2.5], rtol=1e-14)

    def test_identity_at_t0(self, mix_2d, quarter):
        x = np.array([0.4, -1.1])
        assert_array_equal(posterior_mean(mix_2d, quarter, 0, x), x)
        assert_allclose(posterior_cov(mix_2d, quarter, 0, x).cov, np.zeros((2, 2)), atol=0)

    def test_tweedie_equals_direct(self, mix_2d, linear):
        rng = stream(3)
        for t in np.flatnonzero(linear.alpha >= 1e-4)[::37]:
            x = rng.normal(0, 2, (4, 2))
            assert_allclose(posterior_mean(mix_2d, linear, int(t), x),
                            posterior_mean_direct(mix_2d, linear, int(t), x), atol=1e-8, rtol=0)

    def test_between_modes(self, bimodal_1d, linear):
        x = np.array([0.1])
        assert_allclose(posterior_mean(bimodal_1d, linear, 400, x),
                        posterior_mean_direct(bimodal_1d, linear, 400, x), atol=1e-8)

    def test_linear_gaussian_variance(self, gauss_1d, quarter):
        for x in (-3.0, 0.0, 2.0, 7.5):
            mom = posterior_cov(gauss_1d, quarter, 2, [x])
            assert_allclose(mom.cov, [[0.75]], rtol=1e-13)
            assert_allclose(mom.lambda_min, 0.75, rtol=1e-13)

    def test_two_routes_agree(self, mix_2d, linear):
        x = stream(4).normal(0, 2, (20, 2))
        for t in (10, 150, 500, 900):
            a = posterior_cov(mix_2d, linear, t, x)
            b = posterior_cov_moments(mix_2d, linear, t, x)
            assert_allclose(a.cov, b.cov, atol=1e-7, rtol=0)
            assert_allclose(a.cov, np.swapaxes(a.cov, 1, 2), atol=1e-10)
            assert np.all(a.lambda_min >= -1e-10)

    def test_singular_time(self, gauss_1d):
        sch = SimpleNamespace(alpha=np.array([1.0, 0.0]), sigma=np.array([0.0, 1.0]))
        with pytest.raises(SingularTimeError):
            posterior_mean(gauss_1d, sch, 1, [0.0])
        with pytest.raises(SingularTimeError):
            posterior_cov(gauss_1d, sch, 1, [0.0])

    def test_deterministic(self, mix_2d, linear):
        x = np.array([0.5, 0.5])
        a = posterior_cov(mix_2d, linear, 321, x).cov
        b = posterior_cov(mix_2d, linear, 321, x).cov
        assert a.tobytes() == b.tobytes()


class TestExactGuidance:
    def test_zero_scale_limit(self, mix_2d, linear):
        loss = QuadraticTarget([1.0, 1.0], 1e-12)
        g = exact_guidance_grad(mix_2d, linear, 300, np.array([0.2, 0.1]), loss)
        assert_allclose(g, 0.0, atol=1e-10)

    def test_closed_form_matches_quadrature_1d(self, linear):
        m = MixtureModel.single([0.5], 0.7)
        loss = QuadraticTarget([2.0], 0.8)
        for t, x in ((50, 0.3), (400, -1.0), (900, 1.7)):
            cf = exact_guidance_grad(m, linear, t, np.array([x]), loss, method="closed-form")
            qd = exact_guidance_quadrature(m, linear, t, np.array([x]), loss)
            assert_allclose(cf, qd, atol=1e-6)

    def test_mixture_closed_form_matches_quadrature(self, bimodal_1d, linear):
        loss = QuadraticTarget([1.0], 0.5)
        cf = exact_guidance_grad(bimodal_1d, linear, 500, np.array([0.2]), loss)
        qd = exact_guidance_quadrature(bimodal_1d, linear, 500, np.array([0.2]), loss)
        assert_allclose(cf, qd, atol=1e-6)

    def test_small_noise_limit_matches_tweedie(self):
        from tfguide.guidance import tweedie_guidance_grad
        from tfguide.schedule import NoiseSchedule

        m = MixtureModel.single([0.0], 1.0)
        loss = QuadraticTarget([1.5], 0.5)
        x = np.array([0.4])
        for s2 in (1e-4, 1e-6):
            sch = NoiseSchedule(np.array([1.0, 1.0 - s2, 0.5]))
            gap = np.abs(exact_guidance_grad(m, sch, 1, x, loss) - tweedie_guidance_grad(m, sch, 1, x, loss))
            # the gap closes like sigma^2
            assert gap[0] <= 2.0 * s2
        assert gap[0] <= 1e-4

    def test_non_quadratic_uses_quadrature(self, bimodal_1d, linear):
        loss = ComponentLogLoss(bimodal_1d, 1)
        g = exact_guidance_grad(bimodal_1d, linear, 600, np.array([0.0]), loss)
        assert np.all(np.isfinite(g)) and g[0] > 0

    def test_capability_errors(self, linear):
        m3 = MixtureModel.single([0.0, 0.0, 0.0], 1.0)
        loss = ComponentLogLoss(m3, 0)
        with pytest.raises(CapabilityError):
            exact_guidance_grad(m3, linear, 10, np.zeros(3), loss)
        with pytest.raises(CapabilityError):
            exact_guidance_grad(m3, linear, 10, np.zeros(3), loss, method="closed-form")


class TestFiniteDiff:
    def test_quadratic(self):
        assert_allclose(finite_diff_grad(lambda x: x @ x, np.array([1.0, 2.0]), 1e-4), [2, 4], atol=1e-6)

    def test_constant(self):
        assert_array_equal(finite_diff_grad(lambda x: 3.0, np.array([1.0, 2.0]), 1e-4), [0, 0])

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ConfigError):
            finite_diff_grad(lambda x: 0.0, np.zeros(1), 0.0)
