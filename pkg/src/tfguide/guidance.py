"""Guidance gradients and update rules.

Sign convention: every ``*_grad`` function that acts on ``x_t`` returns the
*ascent* direction of ``log p(y | x_t)``, i.e. minus a loss gradient. The
update rules take a loss gradient and descend it. ``smoothed_loss_grad`` works
at the loss level and returns a loss gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import softmax

from .denoisers import DenoiserOutput, as_denoiser
from .errors import ConfigError
from .losses import GuidanceLoss
from .rng import stream
from .schedule import NoiseSchedule, renoise

METHODS = ("exact", "tweedie", "lgd-mc", "smoothed", "random-aug")
OPTIMIZERS = ("gd", "pgd")
PGD_GUARD = 1e-12


@dataclass(frozen=True)
class AugmentationSet:
    """Vector-space analogs of image augmentations, composed as
    ``T(z) = mask * (scale * z + shift) + jitter``.

    Disabled parts are skipped entirely, so the default set is the identity.
    """

    k: int = 10
    jitter_std: float = 0.0
    scale_range: tuple[float, float] | None = None
    shift_range: float = 0.0
    mask_prob: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("augmentation count k must be >= 1")
        if self.jitter_std < 0 or self.shift_range < 0 or not 0 <= self.mask_prob < 1:
            raise ConfigError("invalid augmentation parameters")
        if self.scale_range is not None:
            object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))

    @property
    def is_identity(self) -> bool:
        return (self.jitter_std == 0 and self.scale_range is None
                and self.shift_range == 0 and self.mask_prob == 0)

    def sample(self, rng: np.random.Generator, shape) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Draw ``k`` transforms for points of ``shape``; returns (multiplier, offset)."""
        full = (self.k,) + tuple(shape)
        mult = None
        add = None
        if self.scale_range is not None:
            lo, hi = self.scale_range
            # one isotropic scale per transform and particle
            mult = np.broadcast_to(rng.uniform(lo, hi, size=full[:-1] + (1,)), full).copy()
        if self.shift_range > 0:
            add = rng.uniform(-self.shift_range, self.shift_range, size=full)
        if self.mask_prob > 0:
            keep = (rng.random(full) >= self.mask_prob).astype(np.float64)
            mult = keep if mult is None else mult * keep
            if add is not None:
                add = add * keep
        if self.jitter_std > 0:
            jitter = self.jitter_std * rng.standard_normal(full)
            add = jitter if add is None else add + jitter
        return mult, add

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.scale_range is not None:
            d["scale_range"] = list(self.scale_range)
        return d


@dataclass(frozen=True)
class ResamplingPlan:
    """Repeat each step ``count`` times while ``t_lo * T <= t <= t_hi * T``."""

    count: int = 1
    t_hi: float = 0.8
    t_lo: float = 0.3

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("resampling count must be >= 1")
        if not self.t_hi > self.t_lo:
            raise ConfigError("resampling window needs t_hi > t_lo")

    def repeats(self, t: int, T: int) -> int:
        return self.count if self.t_lo * T <= t <= self.t_hi * T else 1


@dataclass(frozen=True)
class GuidanceConfig:
    method: str = "tweedie"
    optimizer: str = "gd"
    eta: float = 0.5
    eta_rule: str = "sigma"
    lgd_n: int = 10
    lgd_gamma: float = 0.1
    lgd_radius: float | None = None
    smooth_sigma: float = 0.5
    smooth_m: int = 16
    augment: AugmentationSet = field(default_factory=AugmentationSet)
    resampling: ResamplingPlan | None = None
    apply: str = "update"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown guidance method {self.method!r}; expected one of {METHODS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.eta_rule not in ("sigma", "constant"):
            raise ConfigError("eta_rule must be 'sigma' or 'constant'")
        if self.lgd_n < 1 or self.smooth_m < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.smooth_sigma < 0 or (self.lgd_radius is not None and self.lgd_radius < 0):
            raise ConfigError("radii must be >= 0")
        if self.apply not in ("update", "drift"):
            raise ConfigError("apply must be 'update' or 'drift'")

    def step_size(self, schedule: NoiseSchedule, t: int) -> float:
        return self.eta * float(schedule.sigma[t]) if self.eta_rule == "sigma" else self.eta

    def lgd_r(self, schedule: NoiseSchedule, t: int) -> float:
        if self.lgd_radius is not None:
            return self.lgd_radius
        return self.lgd_gamma * float(schedule.sigma[t]) / np.sqrt(float(schedule.alpha[t]))

    @property
    def label(self) -> str:
        parts = [self.method, self.optimizer]
        if self.resampling is not None and self.resampling.count > 1:
            parts.append(f"s{self.resampling.count}")
        return "+".join(parts)

    @classmethod
    def from_dict(cls, data: dict) -> "GuidanceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown guidance keys: {sorted(unknown)}")
        data = dict(data)
        if "augment" in data:
            data["augment"] = AugmentationSet(**data["augment"])
        if data.get("resampling") is not None:
            data["resampling"] = ResamplingPlan(**data["resampling"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["augment"] = self.augment.to_dict()
        d["resampling"] = asdict(self.resampling) if self.resampling is not None else None
        return d


# -- gradient constructions on a denoiser output -----------------------------

def tweedie_from_output(out: DenoiserOutput, loss: GuidanceLoss) -> np.ndarray:
    return -out.pullback(loss.grad(out.x0_hat))


def lgd_mc_from_output(out: DenoiserOutput, loss: GuidanceLoss, n: int, radius: float,
                       rng: np.random.Generator) -> np.ndarray:
    xi = rng.standard_normal((n,) + out.x0_hat.shape)
    samples = out.x0_hat + radius * xi
    weights = softmax(-loss.value(samples), axis=0)
    g = np.sum(weights[..., None] * loss.grad(samples), axis=0)
    return -out.pullback(g)


def random_aug_from_output(out: DenoiserOutput, loss: GuidanceLoss, augset: AugmentationSet,
                           rng: np.random.Generator) -> np.ndarray:
    mult, add = augset.sample(rng, out.x0_hat.shape)
    z = np.broadcast_to(out.x0_hat, (augset.k,) + out.x0_hat.shape)
    if mult is not None:
        z = mult * z
    if add is not None:
        z = z + add
    grads = loss.grad(z)
    if mult is not None:
        grads = mult * grads
    return -out.pullback(np.mean(grads, axis=0))


def smoothed_from_output(out: DenoiserOutput, loss: GuidanceLoss, sigma: float, m: int,
                         rng: np.random.Generator) -> np.ndarray:
    return -out.pullback(smoothed_loss_grad(loss, out.x0_hat, sigma, m, rng=rng))


# -- public operations --------------------------------------------------------

def tweedie_guidance_grad(model, schedule: NoiseSchedule, t: int, x, loss: GuidanceLoss):
    """``-grad_x loss(x0_hat(x))`` through the closed-form Tweedie Jacobian."""
    return tweedie_from_output(as_denoiser(model, schedule)(x, t), loss)


def lgd_mc_grad(model, schedule: NoiseSchedule, t: int, x, loss: GuidanceLoss,
                n: int = 10, r_t: float = 0.0, seed: int = 0):
    """Monte-Carlo estimate of ``grad log mean_i exp(-loss(x0_i))``, ``x0_i ~ N(x0_hat, r_t^2 I)``.

    The draws are reparameterised around ``x0_hat`` (common random numbers per
    seed), so ``n=1, r_t=0`` is exactly :func:`tweedie_guidance_grad`.
    """
    if n < 1 or r_t < 0:
        raise ConfigError("lgd-mc needs n >= 1 and r_t >= 0")
    out = as_denoiser(model, schedule)(x, t)
    return lgd_mc_from_output(out, loss, n, r_t, stream(seed, "lgd-mc", t))


def smoothed_loss_grad(loss: GuidanceLoss, x, smooth_sigma: float, m: int = 16,
                       seed: int = 0, rng: np.random.Generator | None = None,
                       estimator: str = "auto"):
    """Monte-Carlo gradient of ``E_eps[loss(x + sigma eps)]``.

    ``pathwise`` averages ``grad loss(x + sigma eps)``. Indicator-type losses
    have zero gradient almost everywhere, so ``auto`` switches to the
    antithetic score-function form ``E[(l(x + s e) - l(x - s e)) e] / (2 s)``.
    """
    if m < 1 or smooth_sigma < 0:
        raise ConfigError("smoothing needs m >= 1 and sigma >= 0")
    x = np.asarray(x, dtype=np.float64)
    if smooth_sigma == 0:
        return loss.grad(x)
    if estimator == "auto":
        estimator = "pathwise" if loss.differentiable else "score"
    rng = rng if rng is not None else stream(seed, "smooth")
    eps = rng.standard_normal((m,) + x.shape)
    if estimator == "pathwise":
        return np.mean(loss.grad(x + smooth_sigma * eps), axis=0)
    if estimator == "score":
        diff = loss.value(x + smooth_sigma * eps) - loss.value(x - smooth_sigma * eps)
        return np.mean(diff[..., None] * eps, axis=0) / (2.0 * smooth_sigma)
    raise ConfigError(f"unknown estimator {estimator!r}")


def random_aug_grad(model, schedule: NoiseSchedule, t: int, x, loss: GuidanceLoss,
                    augset: AugmentationSet, seed: int = 0):
    """Average guidance gradient over ``augset.k`` freshly drawn transforms of ``x0_hat``."""
    out = as_denoiser(model, schedule)(x, t)
    return random_aug_from_output(out, loss, augset, stream(seed, "random-aug", t))


def guided_update(x_next, g, eta: float, optimizer: str = "gd"):
    """Descend the loss gradient ``g``: ``x - eta g`` or ``x - eta g / ||g||``."""
    if eta < 0:
        raise ConfigError("eta must be >= 0")
    x_next = np.asarray(x_next, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if optimizer == "gd":
        return x_next - eta * g
    if optimizer == "pgd":
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        safe = np.where(norm > PGD_GUARD, norm, 1.0)
        step = np.where(norm > PGD_GUARD, g / safe, 0.0)
        return x_next - eta * step
    raise ConfigError(f"unknown optimizer {optimizer!r}")


def resample_sweep(x_hi, t_hi: int, t_lo: int, s: int, inner, schedule: NoiseSchedule,
                   seed: int = 0, rng: np.random.Generator | None = None):
    """Repeat ``inner`` (one guided step ``t_hi -> t_lo``) ``s`` times, renoising in between.

    Between repetitions the sample is pushed back with
    ``sqrt(beta) x + sqrt(1 - beta) n``, ``beta = alpha[t_hi] / alpha[t_lo]``.
    Returns the last ``x_lo``.
    """
    if s < 1:
        raise ConfigError("resampling count must be >= 1")
    rng = rng if rng is not None else stream(seed, "renoise", t_hi)
    x = np.asarray(x_hi, dtype=np.float64)
    for i in range(s):
        x_lo = inner(x)
        if i < s - 1:
            x = renoise(x_lo, schedule, t_lo, t_hi, rng.standard_normal(x_lo.shape))
    return x_lo
