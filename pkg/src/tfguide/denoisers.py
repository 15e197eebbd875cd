"""Denoiser adaptors: one call gives eps, the Tweedie estimate and its Jacobian.

A call to a denoiser stands for one forward/backward pass of the backbone,
so each call counts as one function evaluation (NFE).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from .oracles import MixtureModel
from .schedule import NoiseSchedule


@dataclass
class DenoiserOutput:
    t: int
    x: np.ndarray
    eps: np.ndarray
    x0_hat: np.ndarray
    pullback: Callable[[np.ndarray], np.ndarray]


class MixtureDenoiser:
    def __init__(self, model: MixtureModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule
        self.nfe = 0

    @property
    def dim(self) -> int:
        return self.model.dim

    def __call__(self, x, t: int) -> DenoiserOutput:
        self.nfe += 1
        x = np.asarray(x, dtype=np.float64)
        x2, single = oracles._prep(self.model, x)
        sch = self.schedule
        mg = oracles._Marginal(self.model, sch, t, x2)
        alpha = max(float(sch.alpha[t]), oracles.ALPHA_FLOOR)
        s2 = sch.sigma[t] ** 2
        eps = -sch.sigma[t] * mg.score
        x0 = (x2 + s2 * mg.score) / np.sqrt(alpha)

        def pullback(v):
            v2 = np.asarray(v, dtype=np.float64).reshape(x2.shape)
            out = (v2 + s2 * mg.hvp(v2)) / np.sqrt(alpha)
            return out[0] if single else out

        if single:
            return DenoiserOutput(t, x, eps[0], x0[0], pullback)
        return DenoiserOutput(t, x, eps, x0, pullback)


def as_denoiser(model, schedule: NoiseSchedule):
    """Wrap a mixture or trajectory prior; denoiser objects pass through."""
    if isinstance(model, MixtureModel):
        return MixtureDenoiser(model, schedule)
    if hasattr(model, "make_denoiser"):
        return model.make_denoiser(schedule)
    if callable(model) and hasattr(model, "nfe"):
        return model
    raise TypeError(f"cannot build a denoiser from {type(model).__name__}")
