"""Guidance gradients, reduction identities and update rules."""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tfguide.errors import ConfigError
from tfguide.guidance import (AugmentationSet, GuidanceConfig, ResamplingPlan, guided_update,
                              lgd_mc_grad, random_aug_grad, resample_sweep, smoothed_loss_grad,
                              tweedie_guidance_grad)
from tfguide.losses import ComponentLogLoss, QuadraticTarget, RuggedLoss, StepLoss
from tfguide.oracles import (MixtureModel, eps_prediction, finite_diff_grad, posterior_mean,
                             posterior_mean_pullback)
from tfguide.rng import stream
from tfguide.schedule import ddim_step, forward_noise


class TestTweedie:
    def test_matches_finite_differences(self, mix_2d, linear):
        rng = stream(0, "tw")
        for loss in (QuadraticTarget([1.0, 0.5], 0.8), ComponentLogLoss(mix_2d, 1)):
            for _ in range(10):
                t = int(rng.integers(1, 1000))
                x = rng.normal(0, 1.5, 2)
                g = tweedie_guidance_grad(mix_2d, linear, t, x, loss)
                fd = finite_diff_grad(lambda z: -loss.value(posterior_mean(mix_2d, linear, t, z)), x, 1e-6)
                assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1e-3)

    def test_zero_at_target(self, mix_2d, linear):
        x = np.array([0.3, -0.7])
        loss = QuadraticTarget(posterior_mean(mix_2d, linear, 400, x))
        assert_array_equal(tweedie_guidance_grad(mix_2d, linear, 400, x, loss), [0.0, 0.0])


class TestLGDMC:
    def test_reduces_to_tweedie_bitwise(self, mix_2d, linear):
        loss = ComponentLogLoss(mix_2d, 0)
        x = np.array([0.2, 0.4])
        a = lgd_mc_grad(mix_2d, linear, 300, x, loss, n=1, r_t=0.0, seed=5)
        b = tweedie_guidance_grad(mix_2d, linear, 300, x, loss)
        assert a.tobytes() == b.tobytes()

    def test_zero_radius_any_n(self, mix_2d, linear):
        loss = QuadraticTarget([1.0, 1.0], 0.5)
        x = np.array([0.2, 0.4])
        assert_allclose(lgd_mc_grad(mix_2d, linear, 300, x, loss, n=25, r_t=0.0),
                        tweedie_guidance_grad(mix_2d, linear, 300, x, loss), atol=1e-10, rtol=0)

    def test_default_sample_count(self):
        assert GuidanceConfig().lgd_n == 10

    def test_radius_rule(self, linear):
        cfg = GuidanceConfig()
        assert cfg.lgd_r(linear, 500) == pytest.approx(0.1 * linear.sigma[500] / np.sqrt(linear.alpha[500]))
        assert GuidanceConfig(lgd_radius=0.3).lgd_r(linear, 500) == 0.3

    def test_matches_exact_expectation_large_n(self, linear):
        # for a quadratic loss the Gaussian-perturbed objective has a closed form
        m = MixtureModel.single([0.0], 1.0)
        loss = QuadraticTarget([2.0], 0.5)
        x, t, r = np.array([0.3]), 300, 0.4
        g = lgd_mc_grad(m, linear, t, x, loss, n=200_000, r_t=r, seed=1)
        x0 = posterior_mean(m, linear, t, x)
        c = loss.scale
        exact = -posterior_mean_pullback(m, linear, t, x, 2 * c * (x0 - 2.0) / (1 + 2 * c * r * r))
        assert_allclose(g, exact, rtol=2e-2)

    def test_validation(self, mix_2d, linear):
        with pytest.raises(ConfigError):
            lgd_mc_grad(mix_2d, linear, 10, np.zeros(2), QuadraticTarget([0.0, 0.0]), n=0, r_t=0.1)


class TestSmoothed:
    def test_zero_sigma_is_raw_gradient(self):
        loss = RuggedLoss([0.0, 0.0])
        x = np.array([0.3, 0.1])
        assert smoothed_loss_grad(loss, x, 0.0).tobytes() == loss.grad(x).tobytes()

    def test_step_gradient_at_zero(self):
        step = StepLoss([1.0], 0.0, 1.0)
        est = np.array([smoothed_loss_grad(step, np.zeros(1), 1.0, 10_000, seed=s)[0] for s in range(30)])
        se = est.std(ddof=1)
        assert abs(est[0] - 1.0 / np.sqrt(2 * np.pi)) <= 3 * se
        assert abs(est.mean() - 0.3989422804) <= 3 * se / np.sqrt(est.size)

    def test_lipschitz_bound_over_probes(self):
        step = StepLoss([1.0], 0.0, 1.0)
        probes = stream(3, "probes").uniform(-3, 3, (1000, 1))
        g = smoothed_loss_grad(step, probes, 1.0, 10_000, seed=3)
        assert g.shape == (1000, 1)
        assert np.max(np.abs(g)) <= np.sqrt(2 / np.pi)

    def test_pathwise_matches_closed_form(self):
        loss = RuggedLoss([0.0], width=3.0)
        x = np.array([0.37])
        g = smoothed_loss_grad(loss, x, 0.5, 200_000, seed=2)
        assert_allclose(g, loss.smoothed(0.5).grad(x), atol=5e-3)

    def test_validation(self):
        with pytest.raises(ConfigError):
            smoothed_loss_grad(QuadraticTarget([0.0]), np.zeros(1), 1.0, m=0)
        with pytest.raises(ConfigError):
            smoothed_loss_grad(QuadraticTarget([0.0]), np.zeros(1), 1.0, estimator="bogus")


class TestRandomAug:
    def test_identity_set_is_tweedie(self, mix_2d, linear):
        loss = ComponentLogLoss(mix_2d, 2)
        x = np.array([0.5, 0.5])
        ref = tweedie_guidance_grad(mix_2d, linear, 200, x, loss)
        one = random_aug_grad(mix_2d, linear, 200, x, loss, AugmentationSet(k=1))
        assert one.tobytes() == ref.tobytes()
        assert_allclose(random_aug_grad(mix_2d, linear, 200, x, loss, AugmentationSet()), ref,
                        rtol=1e-12, atol=1e-15)

    def test_default_count(self):
        assert AugmentationSet().k == 10
        assert AugmentationSet().is_identity

    def test_jitter_matches_smoothing(self, linear):
        m = MixtureModel.single([0.0], 1.0)
        loss = RuggedLoss([1.0], width=3.0)
        x, t, rho = np.array([0.2]), 100, 0.3
        aug = AugmentationSet(k=10, jitter_std=rho)
        draws = np.array([random_aug_grad(m, linear, t, x, loss, aug, seed=s)[0] for s in range(2000)])
        x0 = posterior_mean(m, linear, t, x)
        ref = -posterior_mean_pullback(m, linear, t, x, loss.smoothed(rho).grad(x0))[0]
        se = draws.std(ddof=1) / np.sqrt(draws.size)
        assert abs(draws.mean() - ref) <= 3 * se

    def test_transforms_deterministic_per_stream(self):
        aug = AugmentationSet(k=4, jitter_std=0.1, scale_range=(0.8, 1.2), shift_range=0.3, mask_prob=0.2)
        a = aug.sample(stream(1, "aug"), (3,))
        b = aug.sample(stream(1, "aug"), (3,))
        assert_array_equal(a[0], b[0])
        assert_array_equal(a[1], b[1])
        assert a[0].shape == (4, 3)

    def test_validation(self):
        with pytest.raises(ConfigError):
            AugmentationSet(k=0)
        with pytest.raises(ConfigError):
            AugmentationSet(mask_prob=1.0)


class TestGuidedUpdate:
    def test_pgd_step_length(self):
        x = guided_update(np.zeros(2), np.array([3.0, 4.0]), 0.1, "pgd")
        assert_allclose(-x, [0.06, 0.08], rtol=1e-15)
        assert np.linalg.norm(x) == pytest.approx(0.1, rel=1e-15)

    def test_pgd_lengths_random(self):
        g = stream(4).normal(size=(500, 3)) * 10.0 ** stream(5).uniform(-8, 8, (500, 1))
        d = guided_update(np.zeros((500, 3)), g, 0.37, "pgd")
        assert_allclose(np.linalg.norm(d, axis=1), 0.37, rtol=1e-14)

    def test_gd_zero_eta_identity(self):
        x = np.array([1.0, 2.0])
        assert_array_equal(guided_update(x, np.array([5.0, -1.0]), 0.0, "gd"), x)

    def test_pgd_guard(self):
        x = np.array([1.0, 2.0])
        assert_array_equal(guided_update(x, np.array([1e-13, 0.0]), 0.5, "pgd"), x)

    def test_gd_arithmetic(self):
        assert_allclose(guided_update(np.ones(2), np.array([2.0, -2.0]), 0.25), [0.5, 1.5])

    def test_validation(self):
        with pytest.raises(ConfigError):
            guided_update(np.zeros(1), np.ones(1), -1.0)
        with pytest.raises(ConfigError):
            guided_update(np.zeros(1), np.ones(1), 1.0, "adam")


class TestConfig:
    def test_round_trip(self):
        cfg = GuidanceConfig("random-aug", "pgd", 0.3, augment=AugmentationSet(k=3, jitter_std=0.1),
                             resampling=ResamplingPlan(2, 0.8, 0.3))
        assert GuidanceConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.label == "random-aug+pgd+s2"

    def test_rejects_unknown_keys_and_values(self):
        with pytest.raises(ConfigError):
            GuidanceConfig.from_dict({"method": "tweedie", "momentum": 0.9})
        with pytest.raises(ConfigError):
            GuidanceConfig(method="cfg")
        with pytest.raises(ConfigError):
            GuidanceConfig(eta=-1)
        with pytest.raises(ConfigError):
            ResamplingPlan(2, 0.3, 0.8)

    def test_step_size_rule(self, linear):
        assert GuidanceConfig(eta=0.5).step_size(linear, 500) == pytest.approx(0.5 * linear.sigma[500])
        assert GuidanceConfig(eta=0.5, eta_rule="constant").step_size(linear, 500) == 0.5

    def test_resampling_window(self):
        plan = ResamplingPlan(3)
        assert plan.repeats(900, 1000) == 1
        assert plan.repeats(800, 1000) == 3
        assert plan.repeats(300, 1000) == 3
        assert plan.repeats(100, 1000) == 1


class TestResampleSweep:
    def _inner(self, model, sch, s, t):
        return lambda x: ddim_step(x, s, t, eps_prediction(model, sch, s, x), sch)

    def test_single_pass_is_one_step(self, bimodal_1d, linear):
        x = stream(0).normal(size=(5, 1))
        inner = self._inner(bimodal_1d, linear, 500, 499)
        assert_array_equal(resample_sweep(x, 500, 499, 1, inner, linear), inner(x))

    def test_law_invariance_without_guidance(self, bimodal_1d, linear):
        s_idx, t_idx, n = 500, 499, 10_000
        rng = stream(1, "law")
        x0, _ = bimodal_1d.sample(n, rng)
        x_hi = forward_noise(x0, linear, s_idx, rng.standard_normal(x0.shape))
        inner = self._inner(bimodal_1d, linear, s_idx, t_idx)
        a = linear.alpha[t_idx]
        mean = np.sqrt(a) * bimodal_1d.mean()[0]
        var = a * bimodal_1d.covariance()[0, 0] + 1 - a
        for s in (1, 2, 4):
            x = resample_sweep(x_hi, s_idx, t_idx, s, inner, linear, seed=s)[:, 0]
            assert abs(x.mean() - mean) <= 3 * np.sqrt(var / n)
            assert abs(x.var() - var) <= 3 * var * np.sqrt(2.0 / n) * 1.5

    def test_validation(self, linear):
        with pytest.raises(ConfigError):
            resample_sweep(np.zeros(1), 10, 9, 0, lambda x: x, linear)
