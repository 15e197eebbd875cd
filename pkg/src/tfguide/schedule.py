"""Variance-preserving noise schedules and the DDIM step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, OrderingError

SCHEDULE_KINDS = ("linear-beta", "cosine", "log-snr")


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete table ``alpha[t]`` for ``t = 0..T`` with ``sigma = sqrt(1 - alpha)``.

    ``sigma2`` holds ``1 - alpha`` directly, so ``alpha + sigma2 == 1`` holds
    exactly; ``sigma**2`` can differ from it by one rounding.

    ``alpha`` is the signal level (cumulative product of ``1 - beta``), strictly
    decreasing in ``t``.
    """

    alpha: np.ndarray
    kind: str = "custom"
    sigma: np.ndarray = field(init=False, repr=False)
    sigma2: np.ndarray = field(init=False, repr=False)
    lam: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size < 3:
            raise ConfigError("schedule needs at least T=2 steps")
        if np.any(np.diff(alpha) >= 0):
            raise ConfigError("alpha must be strictly decreasing")
        if alpha[0] > 1.0 or alpha[-1] <= 0.0:
            raise ConfigError("alpha must lie in (0, 1]")
        alpha.setflags(write=False)
        sigma2 = 1.0 - alpha
        sigma2.setflags(write=False)
        sigma = np.sqrt(sigma2)
        sigma.setflags(write=False)
        with np.errstate(divide="ignore"):
            lam = 0.5 * (np.log(alpha) - np.log1p(-alpha))
        lam.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "lam", lam)

    @property
    def T(self) -> int:
        return self.alpha.size - 1

    def beta(self, t: int) -> float:
        """Renoising ratio ``alpha[t] / alpha[t - 1]`` used by resampling."""
        if not 1 <= t <= self.T:
            raise ConfigError(f"beta needs 1 <= t <= T, got {t}")
        return float(self.alpha[t] / self.alpha[t - 1])

    def f(self) -> np.ndarray:
        """Drift coefficient d log sqrt(alpha) / dt on the grid (diagnostics only)."""
        return np.gradient(0.5 * np.log(self.alpha))

    def g2(self) -> np.ndarray:
        """Squared diffusion coefficient on the grid (diagnostics only)."""
        return np.gradient(self.sigma**2) - 2.0 * self.f() * self.sigma**2

    def subgrid(self, steps: int) -> np.ndarray:
        """Indices ``T = t_0 > t_1 > ... > t_steps = 0`` uniform in step index."""
        if not 1 <= steps <= self.T:
            raise ConfigError(f"steps must be in [1, {self.T}], got {steps}")
        grid = np.round(np.linspace(self.T, 0, steps + 1)).astype(int)
        if np.any(np.diff(grid) >= 0):
            raise ConfigError(f"sub-grid with {steps} steps is degenerate")
        return grid

    def h_max(self, grid) -> float:
        """Largest half-log-SNR increment over the finite steps of ``grid``."""
        lam = self.lam[np.asarray(grid)]
        h = np.diff(lam)
        h = h[np.isfinite(h)]
        return float(h.max()) if h.size else 0.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T}


def make_schedule(kind: str = "linear-beta", T: int = 1000, **params) -> NoiseSchedule:
    """Build a schedule with ``alpha[0] = 1`` (or ``>= 0.999`` for ``log-snr``).

    ``linear-beta`` uses DDPM betas from 1e-4 to 0.02. ``cosine`` is the
    improved-DDPM schedule with offset 0.008 and betas clipped at 0.999.
    ``log-snr`` is linear in half-log-SNR between ``lam_max`` and ``lam_min``;
    its index-uniform sub-grids have ``h_max`` exactly proportional to 1/steps.
    """
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if kind == "linear-beta":
        betas = np.linspace(params.get("beta_start", 1e-4), params.get("beta_end", 0.02), T)
        alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        s = params.get("offset", 0.008)
        u = np.arange(T + 1) / T
        f = np.cos((u + s) / (1 + s) * np.pi / 2) ** 2
        ratio = f[1:] / f[:-1]
        betas = np.minimum(1.0 - ratio, 0.999)
        alpha = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "log-snr":
        lam = np.linspace(params.get("lam_max", 5.0), params.get("lam_min", -5.0), T + 1)
        alpha = 1.0 / (1.0 + np.exp(-2.0 * lam))
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    return NoiseSchedule(alpha=alpha, kind=kind)


def forward_noise(x0, schedule: NoiseSchedule, t: int, noise) -> np.ndarray:
    """``sqrt(alpha_t) x0 + sigma_t noise``."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise InputError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    return np.sqrt(schedule.alpha[t]) * x0 + schedule.sigma[t] * noise


def ddim_coefficients(schedule: NoiseSchedule, s: int, t: int) -> tuple[float, float]:
    """Return ``(a, b)`` with ``x_t = a x_s - b eps`` for one DDIM step ``s -> t``.

    ``b = sigma_t (e^h - 1)`` with ``h = lam_t - lam_s``, written as
    ``sqrt(alpha_t / alpha_s) sigma_s - sigma_t`` so it stays finite at
    ``alpha_t = 1``.
    """
    if t > s:
        raise OrderingError(f"DDIM runs backwards in time; got s={s}, t={t}")
    a = np.sqrt(schedule.alpha[t] / schedule.alpha[s])
    b = a * schedule.sigma[s] - schedule.sigma[t]
    return float(a), float(b)


def ddim_step(x_s, s: int, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic exponential-integrator step from index ``s`` down to ``t``."""
    a, b = ddim_coefficients(schedule, s, t)
    if s == t:
        return np.array(x_s, dtype=np.float64, copy=True)
    return a * np.asarray(x_s, dtype=np.float64) - b * np.asarray(eps, dtype=np.float64)


def renoise(x_t, schedule: NoiseSchedule, t: int, s: int, noise) -> np.ndarray:
    """Forward-noise a sample from index ``t`` back up to ``s > t``.

    For adjacent indices this is ``sqrt(beta) x + sqrt(1 - beta) n`` with
    ``beta = alpha_s / alpha_t``.
    """
    if s <= t:
        raise OrderingError(f"renoise goes up in time; got t={t}, s={s}")
    beta = schedule.alpha[s] / schedule.alpha[t]
    return np.sqrt(beta) * np.asarray(x_t) + np.sqrt(1.0 - beta) * np.asarray(noise)
