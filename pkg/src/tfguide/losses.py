"""Guidance losses on clean samples.

Every loss evaluates on a single point of shape ``(d,)`` or a batch of shape
``(n, d)`` and returns a scalar or an ``(n,)`` array. ``grad`` has the shape of
its input.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr

from .errors import ConfigError

LOSS_KINDS = ("quadratic-target", "component-logloss", "step", "rugged", "motion")


class GuidanceLoss:
    """Loss ``l(x0, y)`` with an analytic gradient."""

    kind: str = ""
    scale: float = 1.0
    # False when the gradient is zero almost everywhere (indicator losses);
    # smoothing then needs the score-function estimator.
    differentiable: bool = True

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def value_and_grad(self, x):
        return self.value(x), self.grad(x)

    def to_dict(self) -> dict:
        raise NotImplementedError


class QuadraticTarget(GuidanceLoss):
    """``scale * ||x - target||^2``."""

    kind = "quadratic-target"

    def __init__(self, target, scale: float = 1.0):
        self.target = np.asarray(target, dtype=np.float64)
        if scale <= 0:
            raise ConfigError("loss scale must be positive")
        self.scale = float(scale)

    def value(self, x):
        diff = np.asarray(x, dtype=np.float64) - self.target
        return self.scale * np.sum(diff * diff, axis=-1)

    def grad(self, x):
        return 2.0 * self.scale * (np.asarray(x, dtype=np.float64) - self.target)

    def to_dict(self):
        return {"kind": self.kind, "target": self.target.tolist(), "scale": self.scale}


class ComponentLogLoss(GuidanceLoss):
    """Cross-entropy of the Bayes classifier of a mixture for one component.

    ``scale * -log P(k | x0)`` where ``P`` is the component posterior under the
    clean mixture. This is the closed-form analog of a classifier trained on
    clean data.
    """

    kind = "component-logloss"

    def __init__(self, model, component: int, scale: float = 1.0):
        if not 0 <= component < model.n_components:
            raise ConfigError(f"component {component} out of range")
        if scale <= 0:
            raise ConfigError("loss scale must be positive")
        self.model = model
        self.component = int(component)
        self.scale = float(scale)

    def _logits(self, x):
        m = self.model
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] - m.means
        sq = np.sum(diff * diff, axis=-1)
        logits = np.log(m.weights) - 0.5 * m.dim * np.log(m.variances) - 0.5 * sq / m.variances
        return logits, diff

    def value(self, x):
        logits, _ = self._logits(x)
        return self.scale * (logsumexp(logits, axis=-1) - logits[..., self.component])

    def grad(self, x):
        logits, diff = self._logits(x)
        post = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        comp_scores = -diff / self.model.variances[:, None]
        mean_score = np.sum(post[..., None] * comp_scores, axis=-2)
        return -self.scale * (comp_scores[..., self.component, :] - mean_score)

    def to_dict(self):
        return {"kind": self.kind, "component": self.component, "scale": self.scale}


class StepLoss(GuidanceLoss):
    """Bounded, non-Lipschitz indicator ``height * 1[u.x > offset]``."""

    kind = "step"
    differentiable = False

    def __init__(self, direction=(1.0,), offset: float = 0.0, height: float = 1.0):
        self.direction = np.asarray(direction, dtype=np.float64)
        self.offset = float(offset)
        self.height = float(height)
        self.scale = self.height

    def value(self, x):
        proj = np.asarray(x, dtype=np.float64) @ self.direction
        return self.height * (proj > self.offset).astype(np.float64)

    def grad(self, x):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    def smoothed(self, sigma: float) -> "SmoothedStep":
        return SmoothedStep(self, sigma)

    def to_dict(self):
        return {"kind": self.kind, "direction": self.direction.tolist(),
                "offset": self.offset, "height": self.height}


class SmoothedStep(GuidanceLoss):
    """Closed-form Gaussian smoothing of a :class:`StepLoss`: ``C * Phi(z)``."""

    kind = "smoothed-step"

    def __init__(self, step: StepLoss, sigma: float):
        if sigma <= 0:
            raise ConfigError("smoothing sigma must be positive")
        self.step = step
        self.sigma = float(sigma)
        self.scale = step.height
        self._norm = float(np.linalg.norm(step.direction))

    def _z(self, x):
        proj = np.asarray(x, dtype=np.float64) @ self.step.direction
        return (proj - self.step.offset) / (self.sigma * self._norm)

    def value(self, x):
        return self.step.height * ndtr(self._z(x))

    def grad(self, x):
        z = self._z(x)
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
        coef = self.step.height * pdf / (self.sigma * self._norm)
        return np.multiply.outer(coef, self.step.direction)

    def log_value(self, x):
        return np.log(self.step.height) + log_ndtr(self._z(x))


class RuggedLoss(GuidanceLoss):
    """Broad quadratic bowl around ``target`` covered in narrow cosine wells.

    ``||x - y||^2 / (2 width^2) + amplitude * sum_i (1 - cos(freq (x_i - y_i)))``.
    The global minimum is the target, but plain gradient descent stalls in the
    nearest well: the synthetic stand-in for an adversarial landscape.
    """

    kind = "rugged"

    def __init__(self, target, width: float = 1.0, amplitude: float = 0.2,
                 frequency: float = 8.0, smoothing: float = 0.0):
        self.target = np.asarray(target, dtype=np.float64)
        self.width = float(width)
        self.amplitude = float(amplitude)
        self.frequency = float(frequency)
        self.smoothing = float(smoothing)
        self.scale = 1.0

    @property
    def _damp(self):
        return np.exp(-0.5 * (self.frequency * self.smoothing) ** 2)

    def value(self, x):
        diff = np.asarray(x, dtype=np.float64) - self.target
        d = diff.shape[-1]
        bowl = (np.sum(diff * diff, axis=-1) + d * self.smoothing**2) / (2 * self.width**2)
        ripple = self.amplitude * np.sum(1.0 - self._damp * np.cos(self.frequency * diff), axis=-1)
        return bowl + ripple

    def grad(self, x):
        diff = np.asarray(x, dtype=np.float64) - self.target
        return diff / self.width**2 + (
            self.amplitude * self.frequency * self._damp * np.sin(self.frequency * diff)
        )

    def smoothed(self, sigma: float) -> "RuggedLoss":
        """Exact Gaussian smoothing (the ripples shrink by ``exp(-freq^2 sigma^2 / 2)``)."""
        total = np.sqrt(self.smoothing**2 + sigma**2)
        return RuggedLoss(self.target, self.width, self.amplitude, self.frequency, total)

    def to_dict(self):
        return {"kind": self.kind, "target": self.target.tolist(), "width": self.width,
                "amplitude": self.amplitude, "frequency": self.frequency}


def loss_from_dict(spec: dict, model=None) -> GuidanceLoss:
    kind = spec.get("kind")
    if kind == "quadratic-target":
        return QuadraticTarget(spec["target"], spec.get("scale", 1.0))
    if kind == "component-logloss":
        if model is None:
            raise ConfigError("component-logloss needs a mixture model")
        return ComponentLogLoss(model, spec["component"], spec.get("scale", 1.0))
    if kind == "step":
        return StepLoss(spec.get("direction", [1.0]), spec.get("offset", 0.0), spec.get("height", 1.0))
    if kind == "rugged":
        return RuggedLoss(spec["target"], spec.get("width", 1.0), spec.get("amplitude", 0.2),
                          spec.get("frequency", 8.0))
    if kind == "motion":
        from .motion import MotionCondition

        return MotionCondition.from_dict(spec)
    raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
