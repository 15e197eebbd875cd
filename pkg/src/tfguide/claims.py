"""Verification suites: one function per claim id, each returning a :class:`ClaimReport`.

Every suite is deterministic given its seed. The ``measured`` / ``bound`` /
``tolerance`` triple is what the pass decision is made on; ``details`` holds
diagnostics and ``rows`` the raw measurements written to CSV.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import analysis as an
from .errors import ConfigError
from .guidance import AugmentationSet, GuidanceConfig
from .losses import ComponentLogLoss, RuggedLoss, StepLoss
from .oracles import MixtureModel, posterior_cov
from .rng import stream
from .sampler import sample
from .schedule import make_schedule

CLAIM_IDS = (
    "prop1-linear-rate",
    "prop2-lip",
    "prop2-gradlip",
    "prop3-order",
    "prop4-smoothing",
    "lemma1-tv",
    "prop5-contraction",
    "fig1-two-stage",
    "fig2-adversarial",
)

SMOOTH_SIGMAS = (0.25, 0.5, 1.0)
SLACK = 1.05


@dataclass
class ClaimReport:
    claim_id: str
    passed: bool
    measured: object
    bound: object
    tolerance: float | None
    details: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"claim_id": self.claim_id, "passed": bool(self.passed),
                "measured": _plain(self.measured), "bound": _plain(self.bound),
                "tolerance": self.tolerance, "details": _plain(self.details)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _plain(v) for k, v in r.items()})
        return buf.getvalue()


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


# -- shared experiment fixtures ---------------------------------------------


def fig1_setup():
    """Two-component 2D mixture guided toward the minority component."""
    model = MixtureModel([0.7, 0.3], [[-2.0, 0.0], [2.0, 0.0]], [1.0, 1.0])
    loss = ComponentLogLoss(model, 1, 1.0)
    return model, make_schedule("linear-beta", 1000), loss, GuidanceConfig("tweedie", "gd", 0.5)


def _fig1_runs(seed: int, n_seeds: int, record_states: bool = False):
    model, sch, loss, cfg = fig1_setup()
    return [sample(model, sch, 100, cfg, loss, seed=seed * 100_000 + k, record_states=record_states)
            for k in range(n_seeds)]


# -- suites -----------------------------------------------------------------


def verify_prop1_linear_rate(seed: int = 0, n_seeds: int = 100) -> ClaimReport:
    """Late-phase contraction factors below 1 and the product bookkeeping identity."""
    model, sch, loss, _ = fig1_setup()
    traces = _fig1_runs(seed, n_seeds, record_states=True)
    rows, below, worst_book = [], 0, 0.0
    kappa2_hold = []
    for k, tr in enumerate(traces):
        rep = an.two_stage_metrics(tr, trace_id=k)
        late = tr.loss_curve()[rep.split:]
        prod = float(np.prod(rep.contraction))
        ratio = float(late[-1] / late[0])
        book = abs(prod - ratio) / ratio
        worst_book = max(worst_book, book)
        geo = ratio ** (1.0 / max(late.size - 1, 1))
        below += geo < 1
        kappa2_hold.append(float(np.mean(rep.contraction <= 1.0)))
        rows.append({"seed_index": k, "split": rep.split, "geometric_factor": geo,
                     "product": prod, "ratio": ratio, "bookkeeping_rel_err": book})
    # smallest posterior-covariance eigenvalue along a few trajectories
    lam = np.concatenate([posterior_cov(model, sch, int(t), tr.x[j]).lambda_min[:, None]
                          for tr in traces[:10] for j, t in enumerate(tr.t)]).ravel()
    frac = below / n_seeds
    passed = frac >= 0.9 and worst_book <= 1e-6
    return ClaimReport("prop1-linear-rate", passed,
                       {"fraction_contracting": frac, "bookkeeping_rel_err": worst_book},
                       {"fraction_contracting": 0.9, "bookkeeping_rel_err": 1e-6}, 1e-6,
                       {"n_seeds": n_seeds,
                        "kappa2_zero_step_frequency": float(np.mean(kappa2_hold)),
                        "lambda_min_percentiles": dict(zip(("p5", "p50", "p95"),
                                                           np.percentile(lam, [5, 50, 95])))},
                       rows)


def verify_fig1_two_stage(seed: int = 0, n_seeds: int = 100) -> ClaimReport:
    """Late phase log-linear with negative slope and R^2 >= 0.8 on >= 90% of seeds."""
    model, _, loss, _ = fig1_setup()
    ref_x = model.means[1] + np.sqrt(model.variances[1]) * stream(seed, "fig1-ref").standard_normal((100, 2))
    reference = float(np.mean(loss.value(ref_x)))
    rows, ok = [], 0
    for k, tr in enumerate(_fig1_runs(seed, n_seeds)):
        rep = an.two_stage_metrics(tr, reference_loss=reference, trace_id=k)
        good = rep.slope < 0 and rep.r2 >= 0.8
        ok += good
        rows.append({"seed_index": k, "split": rep.split, "slope": rep.slope, "r2": rep.r2,
                     "early_oscillation": rep.early_oscillation, "final_loss": rep.final_loss,
                     "ok": good})
    frac = ok / n_seeds
    return ClaimReport("fig1-two-stage", frac >= 0.9, frac, 0.9, None,
                       {"n_seeds": n_seeds, "reference_loss": reference}, rows)


def _step_family(sigma):
    step = StepLoss([1.0], 0.0, 1.0)
    sm = step.smoothed(sigma)
    return step, sm


def verify_prop2_lip(seed: int = 0, probes: int = 1000) -> ClaimReport:
    """Smoothed step is C sqrt(2/(pi sigma^2))-Lipschitz; the raw step is not Lipschitz."""
    region = ([-4.0], [4.0])
    rows, ratios = [], []
    for s in SMOOTH_SIGMAS:
        _, sm = _step_family(s)
        est = an.estimate_lipschitz(sm.value, region, probes, h=1e-3, seed=seed)
        bound = np.sqrt(2.0 / (np.pi * s * s))
        ratios.append(est / bound)
        rows.append({"kind": "smoothed", "sigma": s, "h": 1e-3, "estimate": est, "bound": bound})
    step, _ = _step_family(1.0)
    hs = np.array([1e-2, 1e-3, 1e-4])
    raw = np.array([an.estimate_lipschitz(step.value, region, probes, h=h, seed=seed) for h in hs])
    for h, e in zip(hs, raw):
        rows.append({"kind": "raw", "sigma": 0.0, "h": h, "estimate": e, "bound": float("inf")})
    growth = float(np.polyfit(np.log(hs), np.log(raw), 1)[0])
    passed = max(ratios) <= SLACK and abs(growth + 1.0) <= 0.1
    return ClaimReport("prop2-lip", passed,
                       {"max_ratio_to_bound": max(ratios), "raw_growth_exponent": growth},
                       {"max_ratio_to_bound": SLACK, "raw_growth_exponent": -1.0}, 0.1,
                       {"sigmas": list(SMOOTH_SIGMAS)}, rows)


def verify_prop2_gradlip(seed: int = 0, probes: int = 1000) -> ClaimReport:
    """Gradient of the smoothed step is (2C/sigma)-Lipschitz."""
    region = ([-4.0], [4.0])
    rows, ratios = [], []
    for s in SMOOTH_SIGMAS:
        _, sm = _step_family(s)
        est = an.estimate_grad_lipschitz(sm.value, region, probes, h=1e-3, seed=seed, grad=sm.grad)
        bound = 2.0 / s
        ratios.append(est / bound)
        rows.append({"sigma": s, "estimate": est, "bound": bound,
                     "analytic_max": 1.0 / (s * s * np.sqrt(2 * np.pi * np.e))})
    return ClaimReport("prop2-gradlip", max(ratios) <= SLACK, max(ratios), SLACK, 0.05,
                       {"sigmas": list(SMOOTH_SIGMAS)}, rows)


def prop3_setup():
    """Single Gaussian on a half-log-SNR-uniform schedule (so h_max halves with M)."""
    return MixtureModel.single([0.0], 1.0), make_schedule("log-snr", 10_000)


def verify_prop3_order(seed: int = 0, n: int = 200) -> ClaimReport:
    """First-order DDIM error in h_max; stiffer guidance has a larger error constant."""
    model, sch = prop3_setup()
    grids = (10, 20, 40, 80)
    base = an.discretization_order(model, sch, grids=grids, seeds=(seed,), n=n)
    cfg = GuidanceConfig("tweedie", "gd", 1.0, apply="drift")
    stiff = an.discretization_order(model, sch, cfg, StepLoss([1.0], 0.0, 3.0).smoothed(0.1),
                                    grids=grids, seeds=(seed,), n=n)
    smooth = an.discretization_order(model, sch, cfg, StepLoss([1.0], 0.0, 3.0).smoothed(1.0),
                                      grids=grids, seeds=(seed,), n=n)
    rows = []
    for name, rep in (("unguided", base), ("stiff", stiff), ("smooth", smooth)):
        for M, h, e in zip(rep.grids, rep.h_max, rep.errors):
            rows.append({"run": name, "M": M, "h_max": h, "rms_error": e})
    passed = 0.8 <= base.slope <= 1.2 and stiff.unit_slope_intercept > smooth.unit_slope_intercept
    return ClaimReport("prop3-order", passed,
                       {"slope": base.slope,
                        "stiff_log_constant": stiff.unit_slope_intercept,
                        "smooth_log_constant": smooth.unit_slope_intercept},
                       {"slope": [0.8, 1.2]}, 0.2,
                       {"monotone": base.monotone, "unguided": base.to_dict(),
                        "stiff": stiff.to_dict(), "smooth": smooth.to_dict()}, rows)


def verify_prop4_smoothing(seed: int = 0, probes: int = 1000, h: float = 1e-3,
                           jitter: float = 0.5) -> ClaimReport:
    """Jitter augmentation (in expectation) shrinks gradient-Lipschitz by >= 10x at resolution h."""
    region = ([-2.0], [2.0])
    step = StepLoss([1.0], 0.0, 1.0)
    raw = an.estimate_grad_lipschitz(step.value, region, probes, h=h, seed=seed)
    aug_loss = step.smoothed(jitter)
    aug = an.estimate_grad_lipschitz(aug_loss.value, region, probes, h=h, seed=seed)
    # the Monte-Carlo augmentation gradient agrees with the expectation it estimates
    from .guidance import smoothed_loss_grad

    x = np.array([0.2])
    g = np.array([smoothed_loss_grad(step, x, jitter, 4096, rng=stream(seed, "prop4", i))[0]
                  for i in range(16)])
    se = g.std(ddof=1) / np.sqrt(g.size)
    mc_gap = abs(g.mean() - aug_loss.grad(x)[0]) / max(se, 1e-12)
    ratio = raw / aug
    passed = ratio >= 10.0 and aug <= raw and mc_gap <= 3.0
    return ClaimReport("prop4-smoothing", passed, {"ratio": ratio, "mc_gap_se": mc_gap},
                       {"ratio": 10.0, "mc_gap_se": 3.0}, None,
                       {"raw_grad_lipschitz": raw, "augmented_grad_lipschitz": aug,
                        "jitter_std": jitter, "h": h},
                       [{"loss": "raw", "estimate": raw}, {"loss": "augmented", "estimate": aug}])


def verify_lemma1_tv(seed: int = 0, n: int = 1_000_000, bins: int = 100) -> ClaimReport:
    """Closed-form coupling TV versus histogram TV of Gaussian samples."""
    rows, worst = [], 0.0
    for r in (0.0, 0.5, 1.0, 2.0):
        x, y = np.zeros(1), np.array([2.0 * r])
        closed = an.coupling_tv(x, y, 1.0)
        a = stream(seed, "lemma1", "a", int(r * 10)).standard_normal(n) + x[0]
        b = stream(seed, "lemma1", "b", int(r * 10)).standard_normal(n) + y[0]
        est = an.tv_estimate(a, b, bins).value
        worst = max(worst, abs(est - closed))
        rows.append({"r": r, "closed_form": closed, "histogram": est, "abs_diff": abs(est - closed)})
    return ClaimReport("lemma1-tv", worst <= 0.01, worst, 0.0, 0.01, {"samples": n, "bins": bins},
                       rows)


def prop5_setup():
    model = MixtureModel([0.5, 0.5], [[-2.0], [2.0]], [0.25, 0.25])
    return model, make_schedule("linear-beta", 1000), 600, 400


def verify_prop5_contraction(seed: int = 0, runs: int = 200_000, n_boot: int = 200,
                             kick: float = 1.0) -> ClaimReport:
    """Resampling shrinks the TV left by a biased step; geometric envelope with rho < 1."""
    model, sch, t_hi, t_lo = prop5_setup()
    curve = an.resampling_contraction(model, sch, lambda x, out: x + kick, t_hi, t_lo,
                                      runs=runs, seed=seed, n_boot=n_boot)
    null = an.resampling_contraction(model, sch, None, t_hi, t_lo, runs=runs, seed=seed + 1,
                                     n_boot=1)
    rows = [{"s": s, "tv_biased": a, "tv_null": b} for s, a, b in zip(curve.s_values, curve.tv, null.tv)]
    passed = curve.monotone_fraction >= 0.9 and curve.rho < 1.0 and curve.envelope_ok
    return ClaimReport("prop5-contraction", passed,
                       {"monotone_fraction": curve.monotone_fraction, "rho": curve.rho,
                        "decrease_fraction": curve.decrease_fraction},
                       {"monotone_fraction": 0.9, "rho": 1.0}, 0.01,
                       {"curve": curve.to_dict(), "null_tv": null.tv}, rows)


def fig2_setup():
    return RuggedLoss([0.0, 0.0], width=3.0), 0.05, 0.5


def verify_fig2_adversarial(seed: int = 0, n_seeds: int = 100, steps: int = 1000) -> ClaimReport:
    """Smoothed and augmented probes end nearer the target than the raw probe."""
    loss, eta, sig = fig2_setup()
    aug = AugmentationSet(k=10, jitter_std=sig)
    rows = []
    for k in range(n_seeds):
        s = seed * 100_000 + k
        init = stream(s, "fig2-init").normal(0.0, 3.0, 2)
        res = {v: an.accumulated_gradient_probe(loss, v, init, loss.target, steps, eta,
                                                smooth_sigma=sig, augset=aug, seed=s)
               for v in ("raw", "smoothed", "random-aug")}
        rows.append({"seed_index": k, **{f"{v}_distance": r.distance for v, r in res.items()},
                     **{f"{v}_loss": r.final_loss for v, r in res.items()}})
    raw = np.array([r["raw_distance"] for r in rows])
    sm = np.array([r["smoothed_distance"] for r in rows])
    au = np.array([r["random-aug_distance"] for r in rows])
    f_sm, f_au = float(np.mean(sm < raw)), float(np.mean(au < raw))
    return ClaimReport("fig2-adversarial", min(f_sm, f_au) >= 0.8,
                       {"smoothed_fraction": f_sm, "random_aug_fraction": f_au},
                       {"smoothed_fraction": 0.8, "random_aug_fraction": 0.8}, None,
                       {"median_distance": {"raw": float(np.median(raw)), "smoothed": float(np.median(sm)),
                                            "random-aug": float(np.median(au))}}, rows)


SUITES = {
    "prop1-linear-rate": verify_prop1_linear_rate,
    "prop2-lip": verify_prop2_lip,
    "prop2-gradlip": verify_prop2_gradlip,
    "prop3-order": verify_prop3_order,
    "prop4-smoothing": verify_prop4_smoothing,
    "lemma1-tv": verify_lemma1_tv,
    "prop5-contraction": verify_prop5_contraction,
    "fig1-two-stage": verify_fig1_two_stage,
    "fig2-adversarial": verify_fig2_adversarial,
}


def verify(claim_id: str, seed: int = 0) -> ClaimReport:
    if claim_id not in SUITES:
        raise ConfigError(f"unknown claim id {claim_id!r}; expected one of {CLAIM_IDS}")
    return SUITES[claim_id](seed=seed)
