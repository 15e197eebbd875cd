"""Experiment orchestration: (method x seed) cells, reports and artifact files."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import svg
from .config import ExperimentConfig, validate
from .errors import CapabilityError, ConfigError, NumericalError
from .guidance import GuidanceConfig
from .losses import QuadraticTarget
from .oracles import MixtureModel, marginal_log_density
from .sampler import expected_nfe, sample

OUT_ENV = "TFGUIDE_OUT"
DEFAULT_OUT = "tfguide-out"
TRACE_COLUMNS = ("run_id", "step_index", "t", "loss", "grad_norm", "step_size")


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def run_seed(master: int, index: int) -> int:
    """Per-run seed keyed by (master seed, run index) only, so cells pair across methods."""
    return int(np.random.SeedSequence([master, index]).generate_state(1, dtype=np.uint32)[0])


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _finite_or_null(v):
    if isinstance(v, dict):
        return {k: _finite_or_null(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_finite_or_null(x) for x in v]
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def dump_json(doc) -> str:
    """Strict JSON: non-finite floats are written as null."""
    return json.dumps(_finite_or_null(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


# -- per-cell work ------------------------------------------------------------


@dataclass
class CellResult:
    method_index: int
    seed_index: int
    seed: int
    terminal: np.ndarray
    loss_trace: np.ndarray
    grad_norm: np.ndarray
    step_size: np.ndarray
    t: np.ndarray
    nfe: int
    capped: bool
    final_loss: float | None
    distance: float | None
    log_likelihood: float
    violations: int | None = None


def condition_distance(loss, x) -> float | None:
    """Euclidean distance from a terminal sample to the condition's target point."""
    kind = getattr(loss, "kind", None)
    if kind in ("quadratic-target", "rugged"):
        return float(np.linalg.norm(x - loss.target))
    if kind == "component-logloss":
        return float(np.linalg.norm(x - loss.model.means[loss.component]))
    if kind == "motion" and loss.target is not None:
        return float(np.linalg.norm(x.reshape(-1, 2)[-1] - loss.target))
    return None


def _log_likelihood(model, schedule, x) -> float:
    if isinstance(model, MixtureModel):
        return float(marginal_log_density(model, schedule, 0, x))
    return float(model.log_density(schedule, 0, x))


def run_cell(cfg: ExperimentConfig, method_index: int, seed_index: int) -> CellResult:
    guidance = cfg.guidance[method_index]
    seed = run_seed(cfg.master_seed, seed_index)
    tr = sample(cfg.model, cfg.schedule, cfg.steps, guidance, cfg.loss, seed=seed,
                record_states=False)
    x = tr.terminal[0]
    loss_trace = tr.loss[:, 0]
    final = float(cfg.loss.value(x)) if cfg.loss is not None else None
    viol = int(cfg.loss.violations(x)) if getattr(cfg.loss, "kind", None) == "motion" else None
    return CellResult(method_index, seed_index, seed, x, loss_trace, tr.grad_norm[:, 0],
                      tr.step_size, tr.t, tr.nfe, tr.capped, final,
                      condition_distance(cfg.loss, x), _log_likelihood(cfg.model, cfg.schedule, x),
                      viol)


def _run_cell_args(args):
    return run_cell(*args)


# -- reports -------------------------------------------------------------------


@dataclass
class ComparisonRow:
    label: str
    method: str
    optimizer: str | None
    resampling: int
    mean_loss: float | None
    median_loss: float | None
    mean_distance: float | None
    mean_log_likelihood: float
    nfe_per_run: int
    nfe_expected: int
    runtime_s: float = 0.0
    violation_frames: int | None = None

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "runtime_s"}
        if d["violation_frames"] is None:
            d.pop("violation_frames")
        return d


@dataclass
class ComparisonReport:
    name: str
    steps: int
    seeds: int
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        """Deterministic content only; runtimes go to the metadata file."""
        return {"name": self.name, "steps": self.steps, "seeds": self.seeds,
                "rows": [r.to_dict() for r in self.rows]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["label", "method", "optimizer", "resampling", "mean_loss", "median_loss",
                "mean_distance", "mean_log_likelihood", "nfe_per_run", "nfe_expected"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in cols])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def method_labels(guidance: list) -> list:
    labels, seen = [], {}
    for g in guidance:
        base = "unguided" if g is None else g.label
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return labels


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _median_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.median(vals)) if vals else None


def build_report(cfg: ExperimentConfig, results: list, runtimes: list) -> ComparisonReport:
    labels = method_labels(cfg.guidance)
    report = ComparisonReport(cfg.name, cfg.steps, cfg.seed_count)
    for j, g in enumerate(cfg.guidance):
        cells = [r for r in results if r.method_index == j]
        nfe = max((r.nfe for r in cells), default=0)
        row = ComparisonRow(
            label=labels[j], method="none" if g is None else g.method,
            optimizer=None if g is None else g.optimizer,
            resampling=1 if g is None or g.resampling is None else g.resampling.count,
            mean_loss=_mean_or_none([r.final_loss for r in cells]),
            median_loss=_median_or_none([r.final_loss for r in cells]),
            mean_distance=_mean_or_none([r.distance for r in cells]),
            mean_log_likelihood=float(np.mean([r.log_likelihood for r in cells])),
            nfe_per_run=int(nfe), nfe_expected=expected_nfe(cfg.schedule, cfg.steps, g),
            runtime_s=runtimes[j],
            violation_frames=(int(sum(r.violations for r in cells))
                              if cells and cells[0].violations is not None else None))
        report.rows.append(row)
    return report


# -- artifact emission ---------------------------------------------------------


def _trace_csv(cells: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for c in cells:
        for k in range(c.t.size):
            w.writerow([c.seed_index, k, int(c.t[k]), repr(float(c.loss_trace[k])),
                        repr(float(c.grad_norm[k])), repr(float(c.step_size[k]))])
    return buf.getvalue()


def _trace_sidecar(cells: list) -> dict:
    return {"runs": [{"run_id": c.seed_index, "seed": c.seed, "nfe": c.nfe, "capped": c.capped,
                      "final_loss": c.final_loss, "terminal": c.terminal.tolist()} for c in cells]}


def write_artifacts(cfg: ExperimentConfig, out: Path, results: list, report: ComparisonReport | None,
                    meta: dict) -> None:
    labels = method_labels(cfg.guidance)
    formats = set(cfg.formats)
    write_atomic(out / "resolved_config.json", dump_json(cfg.resolved()))
    for j, label in enumerate(labels):
        cells = sorted((r for r in results if r.method_index == j), key=lambda r: r.seed_index)
        if not cells:
            continue
        safe = label.replace("+", "_").replace("#", "_")
        if "csv" in formats:
            write_atomic(out / "traces" / f"{safe}.csv", _trace_csv(cells))
        if "json" in formats:
            write_atomic(out / "traces" / f"{safe}.json", dump_json(_trace_sidecar(cells)))
    if report is not None:
        doc = report.to_dict()
        validate(doc, "comparison")
        if "json" in formats:
            write_atomic(out / "report.json", dump_json(doc))
        if "csv" in formats:
            write_atomic(out / "comparison.csv", report.to_csv())
        if "svg" in formats:
            series = {}
            for j, label in enumerate(labels):
                traces = [r.loss_trace for r in results if r.method_index == j]
                if traces and np.any(np.isfinite(traces[0])):
                    series[label] = np.nanmedian(np.array(traces), axis=0)
            if series:
                write_atomic(out / "plots" / "loss_traces.svg",
                             svg.line_plot(series, "median guidance loss per step", log_y=True))
            write_atomic(out / "plots" / "comparison.svg",
                         svg.bar_chart({r.label: r.median_loss for r in report.rows},
                                       "median final loss"))
            if cfg.is_motion and cfg.loss is not None:
                from .motion import trajectories_svg

                j = len(labels) - 1
                trajs = np.array([r.terminal for r in results if r.method_index == j])
                write_atomic(out / "plots" / "trajectories.svg", trajectories_svg(trajs, cfg.loss))
    write_atomic(out / "metadata.json", dump_json(meta))


def check_capabilities(cfg: ExperimentConfig) -> None:
    if cfg.is_motion:
        from .motion import MOTION_METHODS

        for g in cfg.guidance:
            if g is not None and g.method not in MOTION_METHODS:
                raise CapabilityError(
                    f"method {g.method!r} is not offered for trajectory models; use one of "
                    f"{MOTION_METHODS} (random augmentation needs a network loss to smooth)")
    for g in cfg.guidance:
        if g is not None and g.method == "exact" and not isinstance(cfg.model, MixtureModel):
            raise CapabilityError("exact guidance needs a mixture model")


def run(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> ComparisonReport:
    """Execute every (method, seed) cell and write the artifact tree.

    On a numerical failure the completed cells are flushed (with an
    ``error.json``) before the :class:`NumericalError` propagates.
    """
    check_capabilities(cfg)
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    out = Path(out_dir or cfg.out_dir or default_out_dir())
    started = datetime.now(timezone.utc).isoformat()
    cells = [(j, k) for j in range(len(cfg.guidance)) for k in range(cfg.seed_count)]
    results, runtimes = [], [0.0] * len(cfg.guidance)
    failure = None
    t0 = time.perf_counter()
    if jobs == 1:
        for j, k in cells:
            c0 = time.perf_counter()
            try:
                results.append(run_cell(cfg, j, k))
            except NumericalError as exc:
                failure = (j, k, exc)
                break
            runtimes[j] += time.perf_counter() - c0
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell_args, (cfg, j, k)) for j, k in cells]
            for (j, k), fut in zip(cells, futures):
                try:
                    results.append(fut.result())
                except NumericalError as exc:
                    failure = failure or (j, k, exc)
        # per-method wall-clock is not separable across workers; share it evenly
        runtimes = [(time.perf_counter() - t0) / len(cfg.guidance)] * len(cfg.guidance)
    results.sort(key=lambda r: (r.method_index, r.seed_index))
    meta = {"started": started, "finished": datetime.now(timezone.utc).isoformat(),
            "wall_seconds": time.perf_counter() - t0, "jobs": jobs,
            "method_runtime_s": dict(zip(method_labels(cfg.guidance), runtimes)),
            "python": platform.python_version(), "numpy": np.__version__}
    if failure is not None:
        j, k, exc = failure
        write_artifacts(cfg, out, results, None, meta)
        write_atomic(out / "error.json", dump_json({"method_index": j, "seed_index": k,
                                                    "message": str(exc),
                                                    "diagnostics": exc.diagnostics}))
        raise exc
    report = build_report(cfg, results, runtimes)
    write_artifacts(cfg, out, results, report, meta)
    return report


# -- paired optimizer comparison ----------------------------------------------


def _paired_condition(cfg: ExperimentConfig, base: GuidanceConfig, loss: QuadraticTarget,
                      unconditional: np.ndarray) -> tuple[dict, list]:
    finals = {}
    for opt in ("gd", "pgd"):
        g = replace(base, optimizer=opt)
        finals[opt] = np.array([
            float(loss.value(sample(cfg.model, cfg.schedule, cfg.steps, g, loss,
                                    seed=run_seed(cfg.master_seed, k),
                                    record_states=False).terminal[0]))
            for k in range(cfg.seed_count)])
    diff = finals["pgd"] - finals["gd"]
    n = cfg.seed_count
    spread = float(np.std(loss.value(unconditional), ddof=1)) if n > 1 else 0.0
    summary = {"target": loss.target.tolist(),
               "pgd_le_gd_fraction": float(np.mean(diff <= 0)),
               "median_gd": float(np.median(finals["gd"])),
               "median_pgd": float(np.median(finals["pgd"])),
               "median_difference": float(np.median(diff)),
               "mc_band": 3.0 * spread / np.sqrt(n)}
    rows = [(k, float(finals["gd"][k]), float(finals["pgd"][k])) for k in range(n)]
    return summary, rows


def compare_fig3(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Paired gd vs pgd final losses for a far target (the config's loss) and an easy one.

    The easy target is the prior mean. ``mc_band`` is three standard errors of
    the loss of unconditional samples over the seed count, the resolution at
    which a paired median difference is distinguishable from zero.
    """
    if cfg.seed_count < 1:
        raise ConfigError("compare-fig3 needs at least one seed")
    if not isinstance(cfg.model, MixtureModel):
        raise ConfigError("compare-fig3 needs a mixture model")
    if not isinstance(cfg.loss, QuadraticTarget):
        raise ConfigError("compare-fig3 needs a quadratic-target loss (the far condition)")
    base = next((g for g in cfg.guidance if g is not None), None) or GuidanceConfig()
    unconditional = np.array([
        sample(cfg.model, cfg.schedule, cfg.steps, seed=run_seed(cfg.master_seed, k),
               record_states=False).terminal[0] for k in range(cfg.seed_count)])
    hard, hard_rows = _paired_condition(cfg, base, cfg.loss, unconditional)
    easy_loss = QuadraticTarget(cfg.model.mean(), cfg.loss.scale)
    easy, easy_rows = _paired_condition(cfg, base, easy_loss, unconditional)
    doc = {"seeds": cfg.seed_count, "steps": cfg.steps, "hard": hard, "easy": easy}
    validate(doc, "fig3")
    out = Path(out_dir or cfg.out_dir or default_out_dir())
    write_atomic(out / "fig3_report.json", dump_json(doc))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "run_id", "gd_loss", "pgd_loss"])
    for name, rows in (("hard", hard_rows), ("easy", easy_rows)):
        for k, a, b in rows:
            w.writerow([name, k, repr(a), repr(b)])
    write_atomic(out / "fig3_pairs.csv", buf.getvalue())
    return doc
