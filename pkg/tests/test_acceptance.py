"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or as part of the full suite;
the status lines are written to the terminal even when output is captured.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from tfguide.claims import verify
from tfguide.config import load_config, validate
from tfguide.guidance import AugmentationSet, lgd_mc_grad, random_aug_grad, smoothed_loss_grad, tweedie_guidance_grad
from tfguide.losses import ComponentLogLoss, QuadraticTarget, RuggedLoss
from tfguide.motion import guided_motion_sample
from tfguide.oracles import (MixtureModel, exact_guidance_grad, exact_guidance_quadrature,
                             finite_diff_grad, marginal_log_density, posterior_cov,
                             posterior_cov_moments, posterior_mean, posterior_mean_direct, score)
from tfguide.rng import stream
from tfguide.runner import compare_fig3, run
from tfguide.schedule import make_schedule

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return passed
    return emit


@pytest.fixture(scope="module")
def sch():
    return make_schedule("linear-beta", 1000)


@pytest.fixture(scope="module")
def mix():
    return MixtureModel([0.3, 0.5, 0.2], [[-2.0, 0.5], [1.5, 1.0], [0.0, -2.0]], [0.5, 1.2, 0.8])


def test_criterion_01_oracle_consistency(report, sch, mix):
    rng = stream(0, "acceptance-1")
    score_err = mean_err = cov_err = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 1000))
        x = rng.normal(0, 2, 2)
        fd = finite_diff_grad(lambda z: marginal_log_density(mix, sch, t, z), x, 1e-5)
        s = score(mix, sch, t, x)
        score_err = max(score_err, np.linalg.norm(fd - s) / max(np.linalg.norm(s), 1e-3))
        mean_err = max(mean_err, np.max(np.abs(posterior_mean(mix, sch, t, x)
                                                - posterior_mean_direct(mix, sch, t, x))))
        cov_err = max(cov_err, np.max(np.abs(posterior_cov(mix, sch, t, x).cov
                                              - posterior_cov_moments(mix, sch, t, x).cov)))
    quad_err = 0.0
    m1 = MixtureModel([0.5, 0.5], [[-2.0], [2.0]], [1.0, 1.0])
    loss = QuadraticTarget([1.0], 0.5)
    for t, x in ((50, 0.3), (400, -1.0), (700, 0.2), (900, 1.7)):
        cf = exact_guidance_grad(m1, sch, t, np.array([x]), loss, method="closed-form")
        qd = exact_guidance_quadrature(m1, sch, t, np.array([x]), loss)
        quad_err = max(quad_err, float(np.max(np.abs(cf - qd))))
    ok = score_err <= 1e-5 and mean_err <= 1e-8 and cov_err <= 1e-7 and quad_err <= 1e-6
    assert report(1, ok, f"score rel {score_err:.1e}, mean {mean_err:.1e}, cov {cov_err:.1e}, "
                         f"closed form vs quadrature {quad_err:.1e}")


def test_criterion_02_reduction_identities(report, sch, mix):
    loss = ComponentLogLoss(mix, 1)
    rng = stream(0, "acceptance-2")
    lgd_ok = aug_ok = smooth_ok = True
    for _ in range(20):
        t = int(rng.integers(1, 1000))
        x = rng.normal(0, 2, 2)
        ref = tweedie_guidance_grad(mix, sch, t, x, loss)
        lgd_ok &= lgd_mc_grad(mix, sch, t, x, loss, n=1, r_t=0.0, seed=t).tobytes() == ref.tobytes()
        aug_ok &= random_aug_grad(mix, sch, t, x, loss, AugmentationSet(k=1)).tobytes() == ref.tobytes()
        rugged = RuggedLoss([0.0, 0.0])
        smooth_ok &= smoothed_loss_grad(rugged, x, 0.0).tobytes() == rugged.grad(x).tobytes()
    ok = lgd_ok and aug_ok and smooth_ok
    assert report(2, ok, f"lgd-mc(1,0) bitwise {lgd_ok}, identity augmentation bitwise {aug_ok}, "
                         f"zero smoothing bitwise {smooth_ok}")


def test_criterion_03_smoothing_bounds(report):
    lip = verify("prop2-lip")
    grad = verify("prop2-gradlip")
    ok = lip.passed and grad.passed
    assert report(3, ok, f"Lipschitz ratio {lip.measured['max_ratio_to_bound']:.3f}, "
                         f"raw growth exponent {lip.measured['raw_growth_exponent']:.3f}, "
                         f"gradient-Lipschitz ratio {grad.measured:.3f} (limit 1.05)")


def test_criterion_04_discretization_order(report):
    rep = verify("prop3-order")
    m = rep.measured
    assert report(4, rep.passed, f"slope {m['slope']:.3f} in [0.8, 1.2]; log error constant stiff "
                                 f"{m['stiff_log_constant']:.3f} > smooth {m['smooth_log_constant']:.3f}")


def test_criterion_05_coupling_tv(report):
    rep = verify("lemma1-tv")
    assert report(5, rep.passed, f"max |histogram - closed form| {rep.measured:.4f} (limit 0.01)")


def test_criterion_06_resampling_contraction(report):
    rep = verify("prop5-contraction")
    m = rep.measured
    assert report(6, rep.passed, f"monotone in {m['monotone_fraction']:.2f} of bootstraps, "
                                 f"rho {m['rho']:.3f}, envelope {rep.details['curve']['envelope_ok']}")


def test_criterion_07_two_stage(report):
    fig1 = verify("fig1-two-stage")
    prop1 = verify("prop1-linear-rate")
    ok = fig1.passed and prop1.passed
    assert report(7, ok, f"late-phase fit ok on {fig1.measured:.2f} of seeds; "
                         f"bookkeeping rel err {prop1.measured['bookkeeping_rel_err']:.1e}, contracting on "
                         f"{prop1.measured['fraction_contracting']:.2f} of seeds")


def test_criterion_08_adversarial_probe(report):
    rep = verify("fig2-adversarial")
    m = rep.measured
    assert report(8, rep.passed, f"smoothed closer on {m['smoothed_fraction']:.2f}, "
                                 f"augmented closer on {m['random_aug_fraction']:.2f} of seeds")


def test_criterion_09_pgd_vs_gd(report, tmp_path):
    cfg = load_config(CONFIGS / "fig3.json")
    assert cfg.steps == 50 and cfg.seed_count == 100
    doc = compare_fig3(cfg, tmp_path)
    hard, easy = doc["hard"], doc["easy"]
    ok = hard["pgd_le_gd_fraction"] >= 0.7 and abs(easy["median_difference"]) < easy["mc_band"]
    assert report(9, ok, f"far target pgd<=gd on {hard['pgd_le_gd_fraction']:.2f}; easy target "
                         f"|median diff| {abs(easy['median_difference']):.2e} < band {easy['mc_band']:.2e}")


def test_criterion_10_motion(report):
    cfg = load_config(CONFIGS / "motion.json")
    base = guided_motion_sample(cfg.model, cfg.schedule, cfg.loss, None, n=cfg.seed_count,
                                steps=cfg.steps)
    ratios, viol_ok = [], True
    for g in cfg.guidance:
        if g is None or g.optimizer != "gd":
            continue
        res = guided_motion_sample(cfg.model, cfg.schedule, cfg.loss, g, n=cfg.seed_count,
                                   steps=cfg.steps)
        ratios.append(np.median(base.targeting) / np.median(res.targeting))
        viol_ok &= bool(res.violations.sum() < base.violations.sum())
    rng = stream(0, "acceptance-10")
    fd_err = 0.0
    for _ in range(100):
        x = rng.normal(0, 2.0, cfg.model.dim) + np.tile([2.0, 1.0], cfg.model.frames) * rng.uniform()
        g = cfg.loss.grad(x)
        fd = finite_diff_grad(cfg.loss.value, x, 1e-7)
        fd_err = max(fd_err, np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1.0))
    ok = min(ratios) >= 10 and viol_ok and fd_err <= 1e-5
    assert report(10, ok, f"targeting reduction {min(ratios):.1f}x (min over methods), "
                          f"violations reduced {viol_ok}, gradient check {fd_err:.1e}")


def test_criterion_11_engineering(report, tmp_path):
    cfg = load_config(CONFIGS / "comparison.json")
    rep_a = run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "metadata.json")
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    nfe_ok = all(r.nfe_per_run == r.nfe_expected for r in rep_a.rows)
    validate(json.loads((tmp_path / "a" / "report.json").read_text()), "comparison")
    validate(verify("lemma1-tv").to_dict(), "claim")
    ok = identical and nfe_ok and len(files) > 0
    assert report(11, ok, f"{len(files)} artifacts bit-identical {identical}, NFE exact {nfe_ok}, "
                          "reports schema-valid")
