"""Guided and unguided DDIM sampling with a per-step trace."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import guidance as gm
from .denoisers import as_denoiser
from .errors import ConfigError, NumericalError
from .losses import GuidanceLoss
from .rng import stream
from .schedule import NoiseSchedule, ddim_step, renoise

GRAD_CAP = 1e6


@dataclass
class SampleTrace:
    """Per-step record of one sampling run (a batch of ``n`` particles).

    Row ``k`` is taken at step index ``t[k]`` just before the DDIM step that
    leaves it: ``x`` is the state, ``x0_hat`` its Tweedie estimate, ``loss`` the
    guidance loss at ``x0_hat`` and ``grad_norm`` the norm of the guidance
    gradient actually applied.
    """

    seed: int
    t: np.ndarray
    x: np.ndarray
    x0_hat: np.ndarray
    loss: np.ndarray
    grad_norm: np.ndarray
    step_size: np.ndarray
    terminal: np.ndarray
    nfe: int = 0
    capped: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.t.size

    def loss_curve(self, particle: int = 0) -> np.ndarray:
        return self.loss[:, particle]

    def rows(self, run_id=0, particle: int = 0):
        """CSV rows ``(run_id, step_index, t, loss, grad_norm, step_size)``."""
        for k in range(len(self)):
            yield (run_id, k, int(self.t[k]), float(self.loss[k, particle]),
                   float(self.grad_norm[k, particle]), float(self.step_size[k]))


def _guidance_ascent(cfg: gm.GuidanceConfig, den, out, loss, schedule, t, rng):
    if cfg.method == "tweedie":
        return gm.tweedie_from_output(out, loss)
    if cfg.method == "lgd-mc":
        return gm.lgd_mc_from_output(out, loss, cfg.lgd_n, cfg.lgd_r(schedule, t), rng)
    if cfg.method == "smoothed":
        return gm.smoothed_from_output(out, loss, cfg.smooth_sigma, cfg.smooth_m, rng)
    if cfg.method == "random-aug":
        return gm.random_aug_from_output(out, loss, cfg.augment, rng)
    if cfg.method == "exact":
        from .oracles import MixtureModel, exact_guidance_grad

        model = getattr(den, "model", None)
        if not isinstance(model, MixtureModel):
            from .errors import CapabilityError

            raise CapabilityError("exact guidance needs a mixture model")
        return exact_guidance_grad(model, schedule, t, out.x, loss)
    raise ConfigError(f"unknown method {cfg.method!r}")


def sample(model, schedule: NoiseSchedule, steps: int, guidance: gm.GuidanceConfig | None = None,
           loss: GuidanceLoss | None = None, seed: int = 0, n: int = 1,
           x_T=None, grid=None, record_states: bool = True) -> SampleTrace:
    """Run DDIM from ``T`` to ``0`` on a uniform sub-grid of ``steps`` steps.

    With ``guidance`` set, each step is followed by the guidance update
    computed at the pre-step state (``apply='update'``), or the guidance is
    folded into the noise prediction (``apply='drift'``), which is the form
    whose step-size limit is an ODE. Randomness comes only from substreams of
    ``seed``.
    """
    if guidance is not None and loss is None:
        raise ConfigError("guidance needs a loss")
    den = as_denoiser(model, schedule)
    dim = den.dim
    grid = schedule.subgrid(steps) if grid is None else np.asarray(grid, dtype=int)
    if x_T is None:
        x = stream(seed, "init").standard_normal((n, dim))
    else:
        x = np.array(x_T, dtype=np.float64).reshape(n, dim)
    nfe0 = den.nfe
    n_steps = grid.size - 1
    ts = grid[:-1].copy()
    xs = np.empty((n_steps, n, dim)) if record_states else np.empty((0, n, dim))
    x0s = np.empty((n_steps, n, dim)) if record_states else np.empty((0, n, dim))
    losses = np.full((n_steps, n), np.nan)
    gnorms = np.zeros((n_steps, n))
    etas = np.zeros(n_steps)
    capped = False

    for k in range(n_steps):
        s, t = int(grid[k]), int(grid[k + 1])
        reps = 1
        if guidance is not None and guidance.resampling is not None:
            reps = guidance.resampling.repeats(s, schedule.T)
        eta = guidance.step_size(schedule, s) if guidance is not None else 0.0
        x_cur = x
        for i in range(reps):
            out = den(x_cur, s)
            loss_val = loss.value(out.x0_hat) if loss is not None else None
            if guidance is None:
                x_next = ddim_step(x_cur, s, t, out.eps, schedule)
                gnorm = np.zeros(n)
            else:
                rng = stream(seed, guidance.method, k, i)
                g = _guidance_ascent(guidance, den, out, loss, schedule, s, rng)
                gnorm = np.linalg.norm(g, axis=-1)
                if not np.all(np.isfinite(g)):
                    raise NumericalError("non-finite guidance gradient",
                                         {"step": k, "t": s, "grad_norm": gnorm.tolist()})
                over = gnorm > GRAD_CAP
                if np.any(over):
                    capped = True
                    g = np.where(over[:, None], g * (GRAD_CAP / np.maximum(gnorm, 1e-300))[:, None], g)
                    gnorm = np.minimum(gnorm, GRAD_CAP)
                if guidance.apply == "drift":
                    eps = out.eps - schedule.sigma[s] * guidance.eta * g
                    x_next = ddim_step(x_cur, s, t, eps, schedule)
                else:
                    x_next = ddim_step(x_cur, s, t, out.eps, schedule)
                    x_next = gm.guided_update(x_next, -g, eta, guidance.optimizer)
            if not np.all(np.isfinite(x_next)):
                raise NumericalError("non-finite sample", {"step": k, "t": s,
                                                           "grad_norm": np.asarray(gnorm).tolist()})
            if i < reps - 1:
                noise = stream(seed, "renoise", k, i).standard_normal(x_next.shape)
                x_cur = renoise(x_next, schedule, t, s, noise)
        if record_states:
            xs[k] = x_cur
            x0s[k] = out.x0_hat
        if loss_val is not None:
            losses[k] = loss_val
        gnorms[k] = gnorm
        etas[k] = eta
        x = x_next

    return SampleTrace(seed=seed, t=ts, x=xs, x0_hat=x0s, loss=losses, grad_norm=gnorms,
                       step_size=etas, terminal=x, nfe=den.nfe - nfe0, capped=capped,
                       meta={"steps": n_steps, "schedule": schedule.to_dict(),
                             "guidance": guidance.to_dict() if guidance is not None else None})


def expected_nfe(schedule: NoiseSchedule, steps: int, guidance: gm.GuidanceConfig | None) -> int:
    """NFE implied by the sub-grid and resampling plan (one denoiser call per step)."""
    grid = schedule.subgrid(steps)
    if guidance is None or guidance.resampling is None:
        return steps
    return int(sum(guidance.resampling.repeats(int(s), schedule.T) for s in grid[:-1]))
