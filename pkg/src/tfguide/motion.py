"""Trajectory analog of obstacle-avoiding motion guidance.

A trajectory is ``F`` frames of 2D root positions, flattened row-major to a
vector of length ``2F``. The prior is a zero-mean Gaussian whose covariance is
a squared-exponential kernel over frame index (shared by both coordinates), so
every diffused marginal has an exact score.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .denoisers import DenoiserOutput
from .errors import CapabilityError, ConfigError, InputError, NumericalError
from .guidance import GuidanceConfig
from .losses import GuidanceLoss
from .oracles import ALPHA_FLOOR
from .sampler import SampleTrace, sample
from .schedule import NoiseSchedule

SHARPNESS = 50.0
PENALTY = 100.0
DIST_EPS = 1e-9


class TrajectoryPrior:
    """Zero-mean Gaussian prior over ``F`` 2D frames.

    ``kernel='se'`` uses ``amp^2 exp(-(i-j)^2 / (2 ell^2))``; ``kernel='random-walk'``
    uses ``amp^2 min(i, j)``-style Brownian covariance. With ``pin_start`` the
    first frame is conditioned to the origin; ``nugget`` keeps the covariance
    positive definite after pinning.
    """

    def __init__(self, frames: int = 32, length_scale: float = 8.0, amplitude: float = 2.0,
                 kernel: str = "se", pin_start: bool = True, nugget: float = 1e-6):
        if frames < 2:
            raise ConfigError("frames must be >= 2")
        if length_scale <= 0 or amplitude <= 0 or nugget <= 0:
            raise ConfigError("length_scale, amplitude and nugget must be > 0")
        self.frames = int(frames)
        self.length_scale = float(length_scale)
        self.amplitude = float(amplitude)
        self.kernel = kernel
        self.pin_start = bool(pin_start)
        self.nugget = float(nugget)
        idx = np.arange(self.frames, dtype=np.float64)
        if kernel == "se":
            K = amplitude ** 2 * np.exp(-0.5 * (idx[:, None] - idx[None, :]) ** 2 / length_scale ** 2)
        elif kernel == "random-walk":
            K = amplitude ** 2 * np.minimum(idx[:, None] + 1, idx[None, :] + 1) / length_scale
        else:
            raise ConfigError(f"unknown kernel {kernel!r}")
        if self.pin_start:
            k0 = K[:, :1]
            K = K - k0 @ k0.T / K[0, 0]
        K = 0.5 * (K + K.T) + self.nugget * np.eye(self.frames)
        self.frame_cov = K
        lam, U = np.linalg.eigh(K)
        if lam[0] <= 0:
            raise NumericalError("trajectory covariance is not positive definite",
                                 {"lambda_min": float(lam[0])})
        self._lam = lam
        self._U = U

    @property
    def dim(self) -> int:
        return 2 * self.frames

    @property
    def covariance(self) -> np.ndarray:
        """Full ``2F x 2F`` covariance for the row-major flattening."""
        return np.kron(self.frame_cov, np.eye(2))

    def _apply(self, x, diag):
        """Apply ``U diag Uᵀ`` to each coordinate of flattened trajectories."""
        z = np.asarray(x, dtype=np.float64).reshape(x.shape[:-1] + (self.frames, 2))
        w = np.einsum("fk,...fc->...kc", self._U, z)
        w = w * diag[:, None]
        out = np.einsum("fk,...kc->...fc", self._U, w)
        return out.reshape(x.shape)

    def solve(self, x, alpha: float, sigma2: float):
        """``(alpha Σ + sigma2 I)^{-1} x``."""
        return self._apply(np.asarray(x, dtype=np.float64), 1.0 / (alpha * self._lam + sigma2))

    def matvec(self, x):
        return self._apply(np.asarray(x, dtype=np.float64), self._lam)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.frames, 2))
        w = np.sqrt(self._lam)[:, None] * z
        return np.einsum("fk,nkc->nfc", self._U, w).reshape(n, self.dim)

    def log_density(self, schedule: NoiseSchedule, t: int, x) -> np.ndarray:
        x = self._check(x)
        a, s2 = float(schedule.alpha[t]), float(schedule.sigma[t]) ** 2
        ev = a * self._lam + s2
        quad = np.sum(x * self.solve(x, a, s2), axis=-1)
        logdet = 2.0 * np.sum(np.log(ev))
        return -0.5 * (quad + logdet + self.dim * np.log(2 * np.pi))

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise InputError(f"trajectory length {x.shape[-1]} != 2F = {self.dim}")
        return x

    def make_denoiser(self, schedule: NoiseSchedule) -> "TrajectoryDenoiser":
        return TrajectoryDenoiser(self, schedule)

    def to_dict(self) -> dict:
        return {"kind": "trajectory", "frames": self.frames, "length_scale": self.length_scale,
                "amplitude": self.amplitude, "kernel": self.kernel, "pin_start": self.pin_start,
                "nugget": self.nugget}

    @classmethod
    def from_dict(cls, data: dict) -> "TrajectoryPrior":
        data = {k: v for k, v in data.items() if k != "kind"}
        return cls(**data)


def trajectory_score(prior: TrajectoryPrior, schedule: NoiseSchedule, t: int, x) -> np.ndarray:
    """Score ``-(alpha_t Σ + sigma_t^2 I)^{-1} x`` of the diffused prior."""
    x = prior._check(x)
    return -prior.solve(x, float(schedule.alpha[t]), float(schedule.sigma[t]) ** 2)


class TrajectoryDenoiser:
    def __init__(self, prior: TrajectoryPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule
        self.nfe = 0

    @property
    def dim(self) -> int:
        return self.prior.dim

    def __call__(self, x, t: int) -> DenoiserOutput:
        self.nfe += 1
        x = self.prior._check(x)
        sch = self.schedule
        a = max(float(sch.alpha[t]), ALPHA_FLOOR)
        s2 = float(sch.sigma[t]) ** 2
        sc = -self.prior.solve(x, a, s2)
        eps = -float(sch.sigma[t]) * sc
        x0 = (x + s2 * sc) / np.sqrt(a)

        def pullback(v):
            v = np.asarray(v, dtype=np.float64)
            return (v - s2 * self.prior.solve(v, a, s2)) / np.sqrt(a)

        return DenoiserOutput(t, x, eps, x0, pullback)


@dataclass
class MotionCondition(GuidanceLoss):
    """Final-frame targeting plus sigmoid obstacle penalty.

    ``l = scale * (||y - x(F)||^2 + sum_i sum_obs sigmoid(-(||x(i) - c|| - r) * 50) * 100)``.
    """

    target: np.ndarray | None = None
    obstacles: list = field(default_factory=list)
    scale: float = 1.0
    sharpness: float = SHARPNESS
    penalty: float = PENALTY
    kind: str = "motion"

    def __post_init__(self):
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64).reshape(2)
        obs = []
        for c, r in self.obstacles:
            if r <= 0:
                raise ConfigError("obstacle radii must be > 0")
            obs.append((np.asarray(c, dtype=np.float64).reshape(2), float(r)))
        self.obstacles = obs
        if self.target is None and not obs:
            raise ConfigError("a motion condition needs a target or at least one obstacle")
        if self.scale <= 0:
            raise ConfigError("scale must be > 0")

    def _frames(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] % 2:
            raise InputError("trajectory length must be even")
        return x.reshape(x.shape[:-1] + (x.shape[-1] // 2, 2))

    def terms(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Unscaled ``(targeting, avoidance)`` terms."""
        z = self._frames(x)
        tgt = np.zeros(z.shape[:-2])
        if self.target is not None:
            tgt = np.sum((self.target - z[..., -1, :]) ** 2, axis=-1)
        avoid = np.zeros(z.shape[:-2])
        for c, r in self.obstacles:
            d = np.linalg.norm(z - c, axis=-1)
            avoid = avoid + self.penalty * np.sum(expit(-(d - r) * self.sharpness), axis=-1)
        return tgt, avoid

    def value(self, x):
        tgt, avoid = self.terms(x)
        return self.scale * (tgt + avoid)

    def grad(self, x):
        z = self._frames(x)
        g = np.zeros_like(z)
        if self.target is not None:
            g[..., -1, :] = 2.0 * (z[..., -1, :] - self.target)
        for c, r in self.obstacles:
            diff = z - c
            d = np.linalg.norm(diff, axis=-1)
            s = expit(-(d - r) * self.sharpness)
            coef = -self.penalty * self.sharpness * s * (1 - s) / np.maximum(d, DIST_EPS)
            g = g + coef[..., None] * diff
        return self.scale * g.reshape(np.shape(x))

    def violations(self, x) -> np.ndarray:
        """Frames strictly inside any obstacle, per trajectory."""
        z = self._frames(x)
        inside = np.zeros(z.shape[:-1], dtype=bool)
        for c, r in self.obstacles:
            inside |= np.linalg.norm(z - c, axis=-1) < r
        return np.sum(inside, axis=-1)

    def to_dict(self) -> dict:
        return {"kind": self.kind,
                "target": None if self.target is None else self.target.tolist(),
                "obstacles": [{"center": c.tolist(), "radius": r} for c, r in self.obstacles],
                "scale": self.scale}

    @classmethod
    def from_dict(cls, data: dict) -> "MotionCondition":
        obs = [(o["center"], o["radius"]) for o in data.get("obstacles", [])]
        return cls(target=data.get("target"), obstacles=obs, scale=data.get("scale", 1.0))


def motion_loss(traj, cond: MotionCondition) -> tuple[float, float, np.ndarray]:
    """Return ``(targeting, avoidance, gradient of their scaled sum)``."""
    tgt, avoid = cond.terms(traj)
    return tgt, avoid, cond.grad(traj)


@dataclass
class MotionResult:
    trajectories: np.ndarray
    targeting: np.ndarray
    avoidance: np.ndarray
    violations: np.ndarray
    trace: SampleTrace

    def summary(self) -> dict:
        return {"median_targeting": float(np.median(self.targeting)),
                "mean_avoidance": float(np.mean(self.avoidance)),
                "violation_frames": int(np.sum(self.violations)),
                "runs_with_violation": int(np.sum(self.violations > 0)),
                "nfe": int(self.trace.nfe)}


MOTION_METHODS = ("tweedie", "lgd-mc")


def guided_motion_sample(prior: TrajectoryPrior, schedule: NoiseSchedule, cond: MotionCondition,
                         guidance: GuidanceConfig | None, seed: int = 0, n: int = 1,
                         steps: int = 100) -> MotionResult:
    """Guided DDIM over trajectory space; ``guidance=None`` gives the unconditional run."""
    if guidance is not None and guidance.method not in MOTION_METHODS:
        if guidance.method == "random-aug":
            raise CapabilityError("random augmentation is not offered for the motion task: the "
                                  "guidance loss is analytic, so there is no network to smooth")
        raise CapabilityError(f"motion guidance supports {MOTION_METHODS}, got {guidance.method!r}")
    trace = sample(prior, schedule, steps, guidance=guidance,
                   loss=cond if guidance is not None else None, seed=seed, n=n,
                   record_states=False)
    traj = trace.terminal
    tgt, avoid = cond.terms(traj)
    return MotionResult(traj, tgt, avoid, cond.violations(traj), trace)


def trajectories_csv(trajectories, path=None) -> str:
    """CSV with columns ``(run, frame, x, y)``; written to ``path`` when given."""
    arr = np.atleast_2d(np.asarray(trajectories, dtype=np.float64))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "frame", "x", "y"])
    for r, row in enumerate(arr):
        for f, (px, py) in enumerate(row.reshape(-1, 2)):
            w.writerow([r, f, repr(float(px)), repr(float(py))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def trajectories_svg(trajectories, cond: MotionCondition, path=None, size: int = 480,
                     max_paths: int = 50) -> str:
    """Overlay of trajectories, obstacles (circles) and target (cross)."""
    arr = np.atleast_2d(np.asarray(trajectories, dtype=np.float64))[:max_paths]
    pts = arr.reshape(-1, 2)
    extra = [pts]
    if cond.target is not None:
        extra.append(cond.target[None])
    for c, r in cond.obstacles:
        extra.append(np.array([c - r, c + r]))
    allp = np.concatenate(extra)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(np.max(hi - lo)) or 1.0
    pad = 20.0
    k = (size - 2 * pad) / span

    def px(p):
        return pad + (p[0] - lo[0]) * k, size - pad - (p[1] - lo[1]) * k

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">', '<rect width="100%" height="100%" fill="white"/>']
    for c, r in cond.obstacles:
        cx, cy = px(c)
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r * k:.2f}" fill="#f4c7c3" '
                     'stroke="#c0392b"/>')
    for row in arr:
        path_d = " ".join(f"{x:.2f},{y:.2f}" for x, y in (px(p) for p in row.reshape(-1, 2)))
        parts.append(f'<polyline points="{path_d}" fill="none" stroke="#2c7fb8" '
                     'stroke-opacity="0.5"/>')
    if cond.target is not None:
        tx, ty = px(cond.target)
        parts.append(f'<path d="M{tx - 6:.2f},{ty - 6:.2f} L{tx + 6:.2f},{ty + 6:.2f} '
                     f'M{tx - 6:.2f},{ty + 6:.2f} L{tx + 6:.2f},{ty - 6:.2f}" stroke="black" '
                     'stroke-width="2"/>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
