"""Guidance losses: values, analytic gradients and closed-form smoothing."""
import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, stats

from tfguide.errors import ConfigError
from tfguide.losses import (ComponentLogLoss, QuadraticTarget, RuggedLoss, StepLoss,
                            loss_from_dict)
from tfguide.oracles import MixtureModel, finite_diff_grad
from tfguide.rng import stream


def _fd_check(loss, dim, probes=100, seed=0, scale=2.0):
    rng = stream(seed, "loss-fd")
    worst = 0.0
    for _ in range(probes):
        x = rng.normal(0, scale, dim)
        g = loss.grad(x)
        fd = finite_diff_grad(loss.value, x, 1e-6)
        worst = max(worst, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-2))
    return worst


class TestGradients:
    def test_quadratic(self):
        assert _fd_check(QuadraticTarget([1.0, -2.0, 0.5], 0.7), 3) <= 1e-5

    def test_component_logloss(self, mix_2d):
        assert _fd_check(ComponentLogLoss(mix_2d, 2, 1.5), 2) <= 1e-5

    def test_rugged(self):
        assert _fd_check(RuggedLoss([0.5, -0.5], width=2.0), 2) <= 1e-5

    def test_smoothed_step(self):
        assert _fd_check(StepLoss([1.0, 1.0], 0.3, 2.0).smoothed(0.4), 2) <= 1e-5

    def test_batch_shapes(self, mix_2d):
        x = stream(1).normal(size=(4, 3, 2))
        for loss in (QuadraticTarget([0.0, 1.0]), ComponentLogLoss(mix_2d, 0), RuggedLoss([0.0, 0.0])):
            assert loss.value(x).shape == (4, 3)
            assert loss.grad(x).shape == (4, 3, 2)


class TestValues:
    def test_quadratic_zero_at_target(self):
        loss = QuadraticTarget([1.0, 2.0], 3.0)
        assert loss.value(np.array([1.0, 2.0])) == 0.0
        assert loss.value(np.array([2.0, 2.0])) == pytest.approx(3.0)

    def test_component_logloss_is_bayes_cross_entropy(self, mix_2d):
        x = np.array([0.3, 0.2])
        dens = np.array([w * stats.multivariate_normal.pdf(x, m, v * np.eye(2))
                         for w, m, v in zip(mix_2d.weights, mix_2d.means, mix_2d.variances)])
        assert ComponentLogLoss(mix_2d, 1).value(x) == pytest.approx(-np.log(dens[1] / dens.sum()))

    def test_step_is_bounded_indicator(self):
        step = StepLoss([1.0], 0.0, 1.0)
        assert_allclose(step.value(np.array([[-1e-9], [1e-9]])), [0.0, 1.0])
        assert not step.differentiable

    def test_smoothed_step_is_gaussian_convolution(self):
        step = StepLoss([1.0], 0.2, 1.5)
        sm = step.smoothed(0.7)
        for x in (-1.0, 0.2, 0.9):
            ref, _ = integrate.quad(lambda e: step.value(np.array([x + 0.7 * e])) * stats.norm.pdf(e),
                                    -12, 12, points=[(0.2 - x) / 0.7])
            assert sm.value(np.array([x])) == pytest.approx(ref, abs=1e-10)

    def test_rugged_smoothing_is_exact_convolution(self):
        loss = RuggedLoss([0.0], width=3.0)
        sm = loss.smoothed(0.5)
        for x in (-0.4, 0.1, 1.3):
            ref, _ = integrate.quad(lambda e: loss.value(np.array([x + 0.5 * e])) * stats.norm.pdf(e),
                                    -12, 12, limit=200)
            assert sm.value(np.array([x])) == pytest.approx(ref, abs=1e-9)

    def test_rugged_target_is_global_minimum(self):
        loss = RuggedLoss([1.0, -1.0], width=3.0)
        x = stream(2).normal(0, 3, (1000, 2))
        assert np.all(loss.value(x) >= loss.value(loss.target))


class TestFromDict:
    def test_round_trip(self, mix_2d):
        for loss in (QuadraticTarget([1.0, 2.0], 0.5), ComponentLogLoss(mix_2d, 1, 2.0),
                     StepLoss([1.0], 0.5, 2.0), RuggedLoss([0.0, 1.0], 2.0)):
            back = loss_from_dict(loss.to_dict(), mix_2d)
            x = np.array([0.4, -0.3]) if loss.kind != "step" else np.array([0.7])
            assert back.value(x) == loss.value(x)

    def test_errors(self):
        with pytest.raises(ConfigError):
            loss_from_dict({"kind": "unknown"})
        with pytest.raises(ConfigError):
            loss_from_dict({"kind": "component-logloss", "component": 0})
