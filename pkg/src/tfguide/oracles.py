"""Closed-form oracles for Gaussian-mixture data under forward noising.

With isotropic components ``N(mu_i, tau_i^2 I)`` the noisy marginal at step
``t`` is again a mixture, with means ``sqrt(alpha_t) mu_i`` and variances
``alpha_t tau_i^2 + sigma_t^2``. Scores, Hessians, posterior moments and the
exact conditional-energy gradient all follow in closed form.

All functions accept a point of shape ``(d,)`` or a batch ``(n, d)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .errors import CapabilityError, ConfigError, InputError, SingularTimeError
from .losses import GuidanceLoss, QuadraticTarget
from .schedule import NoiseSchedule

ALPHA_FLOOR = 1e-8


@dataclass(frozen=True)
class MixtureModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        var = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if mu.ndim != 2 or mu.shape[0] != w.size or var.size != w.size:
            raise ConfigError("weights, means and variances must agree on the component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be non-negative and sum to 1")
        if np.any(var <= 0):
            raise ConfigError("component variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    @classmethod
    def single(cls, mean, variance: float = 1.0) -> "MixtureModel":
        return cls([1.0], [np.atleast_1d(mean)], [variance])

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureModel":
        return cls(data["weights"], data["means"], data["variances"])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_json(cls, text: str) -> "MixtureModel":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.sqrt(self.variances[labels])[:, None] * noise
        return x, labels

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        second = np.einsum("k,ki,kj->ij", self.weights, self.means, self.means)
        second += np.sum(self.weights * self.variances) * np.eye(self.dim)
        return second - np.outer(m, m)


@dataclass(frozen=True)
class PosteriorMoments:
    mean: np.ndarray
    cov: np.ndarray
    lambda_min: np.ndarray | float


def _prep(model: MixtureModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != model.dim:
        raise InputError(f"expected points of dimension {model.dim}, got shape {x.shape}")
    return x2, single


def _out(arr, single):
    return arr[0] if single else arr


class _Marginal:
    """Per-component quantities of the noisy marginal at one step."""

    def __init__(self, model: MixtureModel, schedule: NoiseSchedule, t: int, x2: np.ndarray):
        self.alpha = float(schedule.alpha[t])
        self.sigma2 = 1.0 - self.alpha
        self.sqa = np.sqrt(self.alpha)
        self.var = self.alpha * model.variances + self.sigma2  # (K,)
        diff = x2[:, None, :] - self.sqa * model.means  # (n, K, d)
        sq = np.sum(diff * diff, axis=-1)
        d = model.dim
        self.log_terms = (
            np.log(model.weights) - 0.5 * d * np.log(2 * np.pi * self.var) - 0.5 * sq / self.var
        )
        self.log_p = logsumexp(self.log_terms, axis=1)
        self.resp = np.exp(self.log_terms - self.log_p[:, None])
        self.comp_scores = -diff / self.var[None, :, None]
        self.score = np.einsum("nk,nkd->nd", self.resp, self.comp_scores)

    def hessian(self) -> np.ndarray:
        g = self.comp_scores
        outer = np.einsum("nk,nki,nkj->nij", self.resp, g, g)
        iso = np.einsum("nk,k->n", self.resp, 1.0 / self.var)
        d = g.shape[-1]
        return outer - iso[:, None, None] * np.eye(d) - np.einsum("ni,nj->nij", self.score, self.score)

    def hvp(self, v: np.ndarray) -> np.ndarray:
        g = self.comp_scores
        gv = np.einsum("nkd,nd->nk", g, v)
        iso = np.einsum("nk,k->n", self.resp, 1.0 / self.var)
        sv = np.einsum("nd,nd->n", self.score, v)
        return (
            np.einsum("nk,nk,nkd->nd", self.resp, gv, g)
            - iso[:, None] * v
            - sv[:, None] * self.score
        )


def marginal_log_density(model: MixtureModel, schedule: NoiseSchedule, t: int, x):
    """``log p_t(x)`` for the noised mixture."""
    x2, single = _prep(model, x)
    return _out(_Marginal(model, schedule, t, x2).log_p, single)


def score(model: MixtureModel, schedule: NoiseSchedule, t: int, x):
    """``grad_x log p_t(x)``."""
    x2, single = _prep(model, x)
    return _out(_Marginal(model, schedule, t, x2).score, single)


def eps_prediction(model: MixtureModel, schedule: NoiseSchedule, t: int, x):
    """Exact noise prediction ``-sigma_t * score``."""
    return -schedule.sigma[t] * score(model, schedule, t, x)


def score_hessian(model: MixtureModel, schedule: NoiseSchedule, t: int, x):
    x2, single = _prep(model, x)
    return _out(_Marginal(model, schedule, t, x2).hessian(), single)


def _check_alpha(schedule, t):
    if schedule.alpha[t] <= 0.0:
        raise SingularTimeError(f"alpha_{t} = 0: posterior undefined")
    return max(float(schedule.alpha[t]), ALPHA_FLOOR)


def posterior_mean(model: MixtureModel, schedule: NoiseSchedule, t: int, x):
    """Tweedie estimate ``(x + sigma_t^2 score) / sqrt(alpha_t)``."""
    alpha = _check_alpha(schedule, t)
    x2, single = _prep(model, x)
    s = _Marginal(model, schedule, t, x2).score
    return _out((x2 + schedule.sigma[t] ** 2 * s) / np.sqrt(alpha), single)


def _component_posteriors(model, schedule, t, x2):
    """Responsibilities, per-component posterior means (n,K,d) and variances (K,)."""
    alpha = float(schedule.alpha[t])
    sigma2 = 1.0 - alpha
    mg = _Marginal(model, schedule, t, x2)
    gain = np.sqrt(alpha) * model.variances / mg.var  # (K,)
    resid = x2[:, None, :] - np.sqrt(alpha) * model.means
    means = model.means[None] + gain[None, :, None] * resid
    variances = model.variances * sigma2 / mg.var
    return mg, gain, means, variances


def posterior_mean_direct(model: MixtureModel, schedule: NoiseSchedule, t: int, x):
    """Responsibility-weighted average of linear-Gaussian posterior means."""
    _check_alpha(schedule, t)
    x2, single = _prep(model, x)
    mg, _, means, _ = _component_posteriors(model, schedule, t, x2)
    return _out(np.einsum("nk,nkd->nd", mg.resp, means), single)


def posterior_cov(model: MixtureModel, schedule: NoiseSchedule, t: int, x) -> PosteriorMoments:
    """``Cov[x0 | x_t] = (sigma^2 / alpha) (I + sigma^2 H)`` with ``H`` the score Hessian."""
    alpha = _check_alpha(schedule, t)
    x2, single = _prep(model, x)
    mg = _Marginal(model, schedule, t, x2)
    s2 = schedule.sigma[t] ** 2
    eye = np.eye(model.dim)
    cov = (s2 / alpha) * (eye + s2 * mg.hessian())
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    mean = (x2 + s2 * mg.score) / np.sqrt(alpha)
    lam = np.linalg.eigvalsh(cov)[:, 0]
    return PosteriorMoments(_out(mean, single), _out(cov, single), _out(lam, single))


def posterior_cov_moments(model: MixtureModel, schedule: NoiseSchedule, t: int, x) -> PosteriorMoments:
    """Same covariance from mixture moments ``sum w_i (V_i + m_i m_i^T) - m m^T``."""
    _check_alpha(schedule, t)
    x2, single = _prep(model, x)
    mg, _, means, variances = _component_posteriors(model, schedule, t, x2)
    m = np.einsum("nk,nkd->nd", mg.resp, means)
    second = np.einsum("nk,nki,nkj->nij", mg.resp, means, means)
    second += np.einsum("nk,k->n", mg.resp, variances)[:, None, None] * np.eye(model.dim)
    cov = second - np.einsum("ni,nj->nij", m, m)
    lam = np.linalg.eigvalsh(cov)[:, 0]
    return PosteriorMoments(_out(m, single), _out(cov, single), _out(lam, single))


def posterior_mean_pullback(model: MixtureModel, schedule: NoiseSchedule, t: int, x, v):
    """``J^T v`` where ``J`` is the Jacobian of the Tweedie map (symmetric)."""
    alpha = _check_alpha(schedule, t)
    x2, single = _prep(model, x)
    v2 = np.asarray(v, dtype=np.float64).reshape(x2.shape)
    mg = _Marginal(model, schedule, t, x2)
    out = (v2 + schedule.sigma[t] ** 2 * mg.hvp(v2)) / np.sqrt(alpha)
    return _out(out, single)


def exact_guidance_grad(model: MixtureModel, schedule: NoiseSchedule, t: int, x,
                        loss: GuidanceLoss, method: str = "auto"):
    """``grad_x log E_{p(x0|x_t)}[exp(-loss(x0))]``, the exact conditional-score correction.

    Closed form for quadratic losses; adaptive quadrature otherwise (``d <= 2``).
    """
    _check_alpha(schedule, t)
    if method == "auto":
        method = "closed-form" if isinstance(loss, QuadraticTarget) else "quadrature"
    if method == "closed-form":
        if not isinstance(loss, QuadraticTarget):
            raise CapabilityError("closed-form exact guidance only exists for quadratic losses")
        return _exact_quadratic(model, schedule, t, x, loss)
    if method == "quadrature":
        if model.dim > 2:
            raise CapabilityError(f"quadrature exact guidance supports d <= 2, got d={model.dim}")
        return exact_guidance_quadrature(model, schedule, t, x, loss)
    raise ConfigError(f"unknown method {method!r}")


def _exact_quadratic(model, schedule, t, x, loss: QuadraticTarget):
    x2, single = _prep(model, x)
    c = loss.scale
    d = model.dim
    mg, gain, means, variances = _component_posteriors(model, schedule, t, x2)
    shrink = 1.0 + 2.0 * c * variances  # (K,)
    resid = means - loss.target
    log_z = -0.5 * d * np.log(shrink) - c * np.sum(resid * resid, axis=-1) / shrink
    grad_log_z = (-2.0 * c * gain / shrink)[None, :, None] * resid
    log_w = np.log(np.maximum(mg.resp, 1e-300)) + log_z
    tilt = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))
    grad = np.einsum("nk,nkd->nd", tilt, mg.comp_scores + grad_log_z) - mg.score
    return _out(grad, single)


def exact_guidance_quadrature(model: MixtureModel, schedule: NoiseSchedule, t: int, x,
                              loss: GuidanceLoss, half_width: float = 10.0, atol: float = 1e-10):
    """Quadrature oracle: integrate the unnormalised joint over x0 directly.

    ``A(x) = int p0(x0) N(x; sqrt(a) x0, s^2) exp(-l(x0)) dx0`` and its gradient
    are integrated per component on a window of ``half_width`` posterior
    standard deviations; the result is ``grad A / A - grad log p_t``, with the
    score obtained from the same integrals without the loss factor.
    """
    x2, single = _prep(model, x)
    if model.dim > 2:
        raise CapabilityError("quadrature oracle supports d <= 2")
    alpha = float(schedule.alpha[t])
    sqa = np.sqrt(alpha)
    s2 = 1.0 - alpha
    out = np.empty_like(x2)
    for row, xp in enumerate(x2):
        if s2 == 0.0:
            out[row] = -loss.grad(xp / sqa) / sqa
            continue
        num_l, den_l, num_p, den_p = [], [], [], []
        for i in range(model.n_components):
            tau2 = model.variances[i]
            var_t = alpha * tau2 + s2
            center = model.means[i] + sqa * tau2 / var_t * (xp - sqa * model.means[i])
            std = np.sqrt(tau2 * s2 / var_t)

            def log_joint(x0, i=i, tau2=tau2):
                diff0 = x0 - model.means[i]
                diff_t = xp - sqa * x0
                return (
                    np.log(model.weights[i])
                    - 0.5 * model.dim * np.log(2 * np.pi * tau2)
                    - 0.5 * np.sum(diff0 * diff0, axis=-1) / tau2
                    - 0.5 * model.dim * np.log(2 * np.pi * s2)
                    - 0.5 * np.sum(diff_t * diff_t, axis=-1) / s2
                )

            coarse = np.linspace(-half_width, half_width, 401)
            if model.dim == 1:
                pts = center + std * coarse[:, None]
            else:
                g1, g2 = np.meshgrid(coarse[::4], coarse[::4], indexing="ij")
                pts = center + std * np.stack([g1.ravel(), g2.ravel()], axis=1)
            lj = log_joint(pts)
            off_p = float(np.max(lj))
            off_l = float(np.max(lj - loss.value(pts)))

            def integrand(z, lj=log_joint, center=center, std=std, off_l=off_l, off_p=off_p):
                x0 = center + std * np.atleast_1d(z)
                base = lj(x0)
                drift = -(xp - sqa * x0) / s2
                wl = np.exp(base - loss.value(x0) - off_l)
                wp = np.exp(base - off_p)
                return np.concatenate([[wl], wl * drift, [wp], wp * drift])

            if model.dim == 1:
                val, _ = integrate.quad_vec(integrand, -half_width, half_width,
                                            epsabs=atol, epsrel=1e-12, limit=2000)
                jac = std
            else:
                def inner(z1, integrand=integrand):
                    v, _ = integrate.quad_vec(lambda z2: integrand(np.array([z1, z2])),
                                              -half_width, half_width,
                                              epsabs=atol, epsrel=1e-12, limit=2000)
                    return v

                val, _ = integrate.quad_vec(inner, -half_width, half_width,
                                            epsabs=atol, epsrel=1e-12, limit=2000)
                jac = std**2
            d = model.dim
            den_l.append((np.log(val[0] * jac), off_l))
            num_l.append(val[1:1 + d] * jac)
            den_p.append((np.log(val[1 + d] * jac), off_p))
            num_p.append(val[2 + d:] * jac)

        def ratio(dens, nums):
            logs = np.array([a + o for a, o in dens])
            top = logsumexp(logs)
            scales = np.array([np.exp(o - top) for _, o in dens])
            total = sum(sc * n for sc, n in zip(scales, nums))
            return total / np.exp(logsumexp(logs) - top)

        out[row] = ratio(den_l, num_l) - ratio(den_p, num_p)
    return _out(out, single)


def finite_diff_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar field ``f`` at a single point ``x``."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        grad.flat[i] = (float(f(x + e)) - float(f(x - e))) / (2 * h)
    return grad
