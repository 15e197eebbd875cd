"""Estimators for the convergence, smoothness and contraction experiments."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import erfc

from .errors import ConfigError, InsufficientDataError
from .rng import stream

# -- tail function and coupling TV --------------------------------------------


def q_function(a):
    """Gaussian tail ``P(Z >= a)`` via the complementary error function."""
    return 0.5 * erfc(np.asarray(a, dtype=np.float64) / np.sqrt(2.0))


def coupling_tv(x, y, sigma: float) -> float:
    """TV between ``N(x, sigma^2 I)`` and ``N(y, sigma^2 I)``: ``1 - 2 Q(||x - y|| / (2 sigma))``."""
    dist = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)))
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return 0.0 if dist == 0 else 1.0
    return float(1.0 - 2.0 * q_function(dist / (2.0 * sigma)))


@dataclass
class TVEstimate:
    value: float
    bins: int
    sparse: bool


def tv_estimate(samples_a, samples_b, bins=60, range_=None) -> TVEstimate:
    """Histogram TV ``0.5 * sum |p_bin - q_bin|`` on a shared grid (d <= 2).

    ``sparse`` is set when the average bin count falls below 5.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ConfigError("sample sets differ in dimension")
    d = a.shape[1]
    if d > 2:
        raise ConfigError("histogram TV supports d <= 2; project first")
    both = np.concatenate([a, b])
    if range_ is None:
        lo, hi = both.min(axis=0), both.max(axis=0)
        pad = 1e-9 * np.maximum(hi - lo, 1.0)
        range_ = [(lo[i] - pad[i], hi[i] + pad[i]) for i in range(d)]
    ha, _ = np.histogramdd(a, bins=bins, range=range_)
    hb, _ = np.histogramdd(b, bins=bins, range=range_)
    n_bins = ha.size
    tv = 0.5 * np.abs(ha / a.shape[0] - hb / b.shape[0]).sum()
    sparse = min(a.shape[0], b.shape[0]) / n_bins < 5
    return TVEstimate(float(min(max(tv, 0.0), 1.0)), int(n_bins), bool(sparse))


def projected_tv(samples_a, samples_b, bins=60) -> float:
    """Max histogram TV over all 1D and 2D coordinate projections (for d > 2)."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    d = a.shape[1]
    if d <= 2:
        return tv_estimate(a, b, bins).value
    best = 0.0
    for i in range(d):
        best = max(best, tv_estimate(a[:, i], b[:, i], bins).value)
        for j in range(i + 1, d):
            best = max(best, tv_estimate(a[:, [i, j]], b[:, [i, j]], max(bins // 3, 5)).value)
    return best


# -- loss-trace phase analysis -------------------------------------------------


@dataclass
class TwoStageReport:
    trace_id: object
    split: int
    early_oscillation: float
    contraction: np.ndarray
    slope: float
    intercept: float
    r2: float
    final_loss: float
    reference_loss: float | None

    @property
    def mean_contraction(self) -> float:
        return float(np.exp(self.slope))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contraction"] = self.contraction.tolist()
        return d


def _linfit(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot <= 1e-300 * max(1, y.size) else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), float(min(max(r2, 0.0), 1.0))


def two_stage_metrics(loss, reference_loss: float | None = None, window: int = 5,
                      threshold: float = 0.25, trace_id=0, min_late: int = 5) -> TwoStageReport:
    """Split a loss trace into an oscillating phase and a log-linear decay phase.

    The split is the last step whose loss exceeds the median of the preceding
    ``window`` losses by more than ``threshold`` (relative). The late phase
    starts there; a line is fitted to ``log loss`` versus step on it and the
    per-step ratios are reported as contraction factors.
    """
    if hasattr(loss, "loss_curve"):
        loss = loss.loss_curve()
    loss = np.asarray(loss, dtype=np.float64)
    if loss.size < 10:
        raise InsufficientDataError(f"need at least 10 steps, got {loss.size}")
    if np.any(~np.isfinite(loss)) or np.any(loss <= 0):
        raise ConfigError("two-stage analysis needs positive finite losses")
    split = 0
    for k in range(1, loss.size):
        trailing = np.median(loss[max(0, k - window):k])
        if loss[k] > (1.0 + threshold) * trailing:
            split = k
    split = min(split, loss.size - min_late)
    late = loss[split:]
    steps = np.arange(split, loss.size, dtype=np.float64)
    slope, intercept, r2 = _linfit(steps, np.log(late))
    early = loss[: split + 1]
    osc = float(np.log(early.max()) - np.log(early.min())) if early.size > 1 else 0.0
    return TwoStageReport(trace_id=trace_id, split=int(split), early_oscillation=osc,
                          contraction=late[1:] / late[:-1], slope=slope, intercept=intercept,
                          r2=r2, final_loss=float(loss[-1]), reference_loss=reference_loss)


# -- Lipschitz estimation ----------------------------------------------------


def _box(region):
    lo, hi = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in region)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ConfigError("region must be (lower, upper) with upper > lower")
    return lo, hi


def _scan_lines(lo, hi, h, rng, n_lines):
    """Point sequences spaced ``h`` apart along random lines crossing the box."""
    d = lo.size
    lines = []
    for _ in range(n_lines):
        if d == 1:
            direction = np.ones(1)
            start = lo.copy()
        else:
            direction = rng.standard_normal(d)
            direction /= np.linalg.norm(direction)
            start = rng.uniform(lo, hi)
        # extent of the line inside the box
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - start) / direction
            t2 = (hi - start) / direction
        tmin = np.nanmax(np.minimum(t1, t2))
        tmax = np.nanmin(np.maximum(t1, t2))
        count = int(np.floor((tmax - tmin) / h)) + 1
        s = tmin + h * np.arange(count)
        lines.append(start + s[:, None] * direction)
    return lines


def estimate_lipschitz(f, region, probes: int = 1000, h: float = 1e-3, seed: int = 0,
                       n_lines: int | None = None, max_points: int = 200_000) -> float:
    """Largest observed ``|f(a) - f(b)| / ||a - b||``.

    ``f`` maps a batch ``(n, d)`` to ``(n,)``. Pairs come from ``probes``
    random points in the box plus line scans with spacing ``h``, so a jump
    anywhere on a scanned line is seen with slope ``~1/h``.
    """
    if probes < 2:
        raise ConfigError("need at least 2 probes")
    lo, hi = _box(region)
    rng = stream(seed, "lipschitz")
    pts = rng.uniform(lo, hi, size=(probes, lo.size))
    fa = np.asarray(f(pts), dtype=np.float64)
    dist = np.linalg.norm(pts[1:] - pts[:-1], axis=1)
    best = float(np.max(np.abs(fa[1:] - fa[:-1]) / dist))
    n_lines = n_lines or (1 if lo.size == 1 else 8)
    for line in _scan_lines(lo, hi, h, rng, n_lines):
        if len(line) > max_points:
            line = line[:max_points]
        vals = np.asarray(f(line), dtype=np.float64)
        steps = np.linalg.norm(np.diff(line, axis=0), axis=1)
        best = max(best, float(np.max(np.abs(np.diff(vals)) / steps)))
    return best


def _fd_grad_batch(f, pts, h):
    d = pts.shape[1]
    grads = np.empty_like(pts)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        grads[:, i] = (np.asarray(f(pts + e)) - np.asarray(f(pts - e))) / (2 * h)
    return grads


def estimate_grad_lipschitz(f, region, probes: int = 1000, h: float = 1e-3, seed: int = 0,
                            grad=None, n_lines: int | None = None,
                            max_points: int = 200_000) -> float:
    """Largest observed ``||grad f(a) - grad f(b)|| / ||a - b||``.

    Gradients are central differences at resolution ``h`` unless ``grad`` is
    supplied; sampling mirrors :func:`estimate_lipschitz`.
    """
    if probes < 2:
        raise ConfigError("need at least 2 probes")
    lo, hi = _box(region)
    rng = stream(seed, "grad-lipschitz")
    gfun = grad if grad is not None else (lambda p: _fd_grad_batch(f, p, h))
    pts = rng.uniform(lo, hi, size=(probes, lo.size))
    ga = np.asarray(gfun(pts), dtype=np.float64).reshape(pts.shape)
    dist = np.linalg.norm(pts[1:] - pts[:-1], axis=1)
    best = float(np.max(np.linalg.norm(ga[1:] - ga[:-1], axis=1) / dist))
    n_lines = n_lines or (1 if lo.size == 1 else 8)
    for line in _scan_lines(lo, hi, h, rng, n_lines):
        if len(line) > max_points:
            line = line[:max_points]
        g = np.asarray(gfun(line), dtype=np.float64).reshape(line.shape)
        steps = np.linalg.norm(np.diff(line, axis=0), axis=1)
        best = max(best, float(np.max(np.linalg.norm(np.diff(g, axis=0), axis=1) / steps)))
    return best


# -- discretisation order ------------------------------------------------------


@dataclass
class OrderFitReport:
    grids: list
    h_max: list
    errors: list
    slope: float
    intercept: float
    monotone: bool
    reference_steps: int
    unit_slope_intercept: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def discretization_order(model, schedule, guidance=None, loss=None, grids=(10, 20, 40, 80),
                         seeds=(0,), n: int = 200, reference_steps: int | None = None) -> OrderFitReport:
    """Fit ``log error = slope * log h_max + intercept`` for DDIM terminal samples.

    Every grid starts from the same ``x_T`` per seed; the error is the RMS
    distance to a ``reference_steps`` run (default: every step of the
    schedule).
    """
    from .sampler import sample

    grids = sorted(int(g) for g in grids)
    if len(grids) < 3:
        raise ConfigError("need at least 3 grid sizes")
    ref_steps = reference_steps or schedule.T
    if ref_steps < 10 * grids[-1]:
        raise ConfigError("reference grid must be >= 10x the largest grid")
    dim = getattr(model, "dim", None)
    sq = np.zeros(len(grids))
    total = 0
    for seed in seeds:
        x_T = stream(seed, "order-init").standard_normal((n, dim))
        ref = sample(model, schedule, ref_steps, guidance, loss, seed=seed, n=n, x_T=x_T,
                     record_states=False).terminal
        for j, M in enumerate(grids):
            out = sample(model, schedule, M, guidance, loss, seed=seed, n=n, x_T=x_T,
                         record_states=False).terminal
            sq[j] += np.sum((out - ref) ** 2)
        total += n
    errors = np.sqrt(sq / total)
    hs = np.array([schedule.h_max(schedule.subgrid(M)) for M in grids])
    slope, intercept = np.polyfit(np.log(hs), np.log(errors), 1)
    monotone = bool(np.all(np.diff(errors) < 0))
    return OrderFitReport(grids=grids, h_max=hs.tolist(), errors=errors.tolist(),
                          slope=float(slope), intercept=float(intercept), monotone=monotone,
                          reference_steps=int(ref_steps),
                          unit_slope_intercept=float(np.mean(np.log(errors) - np.log(hs))))


# -- resampling contraction ---------------------------------------------------


@dataclass
class ContractionCurve:
    s_values: list
    tv: list
    rho: float
    envelope_ok: bool
    monotone_fraction: float
    decrease_fraction: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _resampled_population(den, schedule, s_idx, t_idx, x_hi, reps, kick, seed):
    """First pass applies ``kick`` after the exact DDIM step; later passes are exact."""
    from .schedule import ddim_step, renoise

    x = x_hi
    for i in range(reps):
        out = den(x, s_idx)
        x_lo = ddim_step(x, s_idx, t_idx, out.eps, schedule)
        if i == 0 and kick is not None:
            x_lo = kick(x_lo, out)
        if i < reps - 1:
            noise = stream(seed, "contraction-renoise", i).standard_normal(x_lo.shape)
            x = renoise(x_lo, schedule, t_idx, s_idx, noise)
    return x_lo


def resampling_contraction(model, schedule, kick, t_hi: int, t_lo: int,
                           s_values=(1, 2, 4, 8), runs: int = 200_000, seed: int = 0,
                           bins: int = 60, n_boot: int = 200, tol: float = 0.01) -> ContractionCurve:
    """TV between a kicked-then-resampled population and an unkicked one, per ``s``.

    Both populations start from exact samples of ``p_{t_hi}`` (independent
    draws), take the DDIM step to ``t_lo`` and ``s - 1`` renoise/step
    repetitions. ``kick(x_lo, out)`` perturbs the first pass only, standing
    in for a biased guidance step. ``kick=None`` compares equal laws.
    """
    from .denoisers import as_denoiser
    from .schedule import forward_noise

    s_values = list(s_values)
    if s_values[0] != 1 or any(b <= a for a, b in zip(s_values, s_values[1:])):
        raise ConfigError("s_values must be ascending and start at 1")
    den = as_denoiser(model, schedule)

    def population(tag, use_kick):
        rng = stream(seed, "contraction-data", tag)
        x0, _ = model.sample(runs, rng)
        x_hi = forward_noise(x0, schedule, t_hi, rng.standard_normal(x0.shape))
        return [
            _resampled_population(den, schedule, t_hi, t_lo, x_hi, s,
                                  kick if use_kick else None, seed * 1000 + 2 * s + use_kick)
            for s in s_values
        ]

    kicked = population("kicked", True)
    clean = population("clean", False)
    dim = kicked[0].shape[1]

    def curve(idx_a=None, idx_b=None):
        vals = []
        for pa, pb in zip(kicked, clean):
            a = pa if idx_a is None else pa[idx_a]
            b = pb if idx_b is None else pb[idx_b]
            vals.append(tv_estimate(a, b, bins).value if dim <= 2 else projected_tv(a, b, bins))
        return np.array(vals)

    tv = curve()
    rng = stream(seed, "contraction-boot")
    mono = 0
    dec = 0
    for _ in range(n_boot):
        ia = rng.integers(0, runs, runs)
        ib = rng.integers(0, runs, runs)
        c = curve(ia, ib)
        mono += bool(np.all(np.diff(c) <= tol))
        dec += bool(c[-1] < c[0])
    s_arr = np.array(s_values, dtype=np.float64)

    def sse(rho):
        return float(np.sum((tv - tv[0] * rho ** (s_arr - 1)) ** 2))

    rho = float(optimize.minimize_scalar(sse, bounds=(1e-6, 1.0), method="bounded").x)
    envelope_ok = bool(np.all(tv <= tv[0] * rho ** (s_arr - 1) + 0.05))
    return ContractionCurve(s_values=s_values, tv=tv.tolist(), rho=rho, envelope_ok=envelope_ok,
                            monotone_fraction=mono / n_boot, decrease_fraction=dec / n_boot,
                            extra={"beta": float(schedule.alpha[t_hi] / schedule.alpha[t_lo]),
                                   "runs": runs, "t_hi": t_hi, "t_lo": t_lo})


# -- accumulated-gradient probe ----------------------------------------------


@dataclass
class ProbeResult:
    variant: str
    trajectory: np.ndarray
    final_loss: float
    distance: float
    diverged: bool


def accumulated_gradient_probe(loss, variant: str, init, target, steps: int = 1000,
                               eta: float = 0.01, smooth_sigma: float = 0.5, m: int = 16,
                               augset=None, seed: int = 0) -> ProbeResult:
    """Plain gradient descent on ``loss`` (``raw``), its Gaussian smoothing, or augmented copies."""
    from .guidance import AugmentationSet, smoothed_loss_grad

    if steps < 0:
        raise ConfigError("steps must be >= 0")
    x = np.array(init, dtype=np.float64)
    traj = [x.copy()]
    augset = augset or AugmentationSet(k=10, jitter_std=smooth_sigma, shift_range=0.0)
    diverged = False
    for k in range(steps):
        rng = stream(seed, "probe", variant, k)
        if variant == "raw":
            g = loss.grad(x)
        elif variant == "smoothed":
            g = smoothed_loss_grad(loss, x, smooth_sigma, m, rng=rng)
        elif variant == "random-aug":
            mult, add = augset.sample(rng, x.shape)
            z = np.broadcast_to(x, (augset.k,) + x.shape)
            if mult is not None:
                z = mult * z
            if add is not None:
                z = z + add
            grads = loss.grad(z)
            if mult is not None:
                grads = mult * grads
            g = grads.mean(axis=0)
        else:
            raise ConfigError(f"unknown probe variant {variant!r}")
        x = x - eta * g
        traj.append(x.copy())
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e6:
            diverged = True
            break
    traj = np.array(traj)
    return ProbeResult(variant=variant, trajectory=traj, final_loss=float(loss.value(x)),
                       distance=float(np.linalg.norm(x - np.asarray(target))), diverged=diverged)
