"""Experiment runners behind the CLI: sampling, KL sweeps, distillation,
bound checks and plot-data emission.

Sweeps never raise on a bad grid point: the failure is stored in the row.
Rows are sorted by their sweep coordinates before they are written, so the
output does not depend on worker completion order.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import distillation as ds
from .. import metrics as mt
from .. import sampler as sp
from .. import targets as tg
from ..forward_process import Regime, build_schedule_nonsmooth, build_schedule_smooth, make_rng
from ..pf_ode import ClosedFormAffine, Method, OdeOracle, solver_step_error
from ..score_field import Perturbation, ScoreField
from .config import ExperimentConfig

# Fixed 1-D mixture used where a non-Gaussian, non-log-concave target is needed.
BENCH_MIXTURE = tg.TargetDistribution([0.3, 0.7], [[-1.5], [1.0]], [0.2, 0.3])
BENCH_GAUSSIAN = tg.TargetDistribution.gaussian([0.0], 4.0)


def build_field(cfg: ExperimentConfig, target: tg.TargetDistribution, eps: float | None = None) -> ScoreField:
    sc = cfg.score
    eps = sc.eps if eps is None else eps
    if sc.mode == "exact" and eps == 0:
        return ScoreField.exact(target)
    if sc.mode == "smooth_field":
        return ScoreField.perturbed(target, Perturbation.smooth(target.d, eps, sc.freq, sc.seed))
    direction = sc.direction if sc.direction is not None else [1.0] + [0.0] * (target.d - 1)
    if len(direction) != target.d:
        raise ValueError("score.direction length must equal the target dimension")
    return ScoreField.perturbed(target, Perturbation.constant(direction, eps))


def build_schedule(cfg: ExperimentConfig, target: tg.TargetDistribution, T: float | None = None):
    r = cfg.regime
    m2 = tg.second_moment(target)
    T = r.T if T is None else T
    if r.kind == Regime.SMOOTH.value:
        return build_schedule_smooth(r.L, target.d, m2, None if T is not None else r.eps, T=T, gap=r.gap)
    return build_schedule_nonsmooth(target.d, m2, None if T is not None else r.eps, r.delta, T=T)


def pick_map(field: ScoreField, cfg: ExperimentConfig):
    cmap = sp.exact_score_map_for(field)
    return cmap if cmap is not None else OdeOracle(field, cfg.integrator.build())


# ---------------------------------------------------------------------------
# Records


@dataclass
class ExperimentRecord:
    config_hash: str
    regime: str
    K: int
    T: float
    eps_score: float
    d: int
    L: float
    delta: float
    kl_measured: float
    kl_bound: float
    init_term: float
    score_term: float
    stop_time: float
    method: str
    status: str
    error: str
    wall_seconds: float
    seed: int

    def sort_key(self):
        return (self.T, self.eps_score, self.K)


RECORD_COLUMNS = [f.name for f in dataclasses.fields(ExperimentRecord)]


def records_to_csv(records, columns=None) -> str:
    columns = columns or RECORD_COLUMNS
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        row = dataclasses.asdict(r) if dataclasses.is_dataclass(r) else r
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def records_from_csv(text: str) -> list[ExperimentRecord]:
    out = []
    types = {f.name: f.type for f in dataclasses.fields(ExperimentRecord)}
    for row in csv.DictReader(io.StringIO(text)):
        vals = {}
        for k, v in row.items():
            tp = types[k]
            vals[k] = int(v) if tp in (int, "int") else float(v) if tp in (float, "float") else v
        out.append(ExperimentRecord(**vals))
    return out


# ---------------------------------------------------------------------------
# Sweep


def measure_kl(cfg: ExperimentConfig, target: tg.TargetDistribution, schedule, field: ScoreField):
    """Exact KL at the stop time: affine pushforward, else 1-D density propagation."""
    init = cfg.sampler.init
    cmap = sp.exact_score_map_for(field)
    if cmap is not None:
        push = sp.gaussian_pushforward(schedule, cmap, target.d, init, target)
        law = sp.true_law(target, schedule.stop_time)
        return mt.kl_gaussian(law.mean, law.var, push.law.mean, push.law.var), "gaussian_pushforward"
    if target.d != 1:
        raise ValueError("exact KL needs an affine map or a 1-D target")
    dens = sp.density_pushforward_1d(schedule, OdeOracle(field, cfg.integrator.build()), init=init, target=target)
    stop = schedule.stop_time
    lo, hi = tg.quadrature_bounds(tg.marginal_at(target, stop))
    q = mt.kl_quadrature_1d(lambda y: tg.log_density(target, stop, y[:, None]), dens.log_density, lo, hi)
    return q.value, "density_quadrature"


def _sweep_point(args):
    cfg, T, eps = args
    t0 = time.perf_counter()
    target = cfg.build_target()
    d, m2 = target.d, tg.second_moment(target)
    r = cfg.regime
    base = dict(config_hash=cfg.config_hash(), regime=r.kind, T=float(T), eps_score=float(eps), d=d,
                L=float(r.L) if r.kind == "smooth" else float("nan"),
                delta=float(r.delta) if r.kind == "nonsmooth" else float("nan"), seed=cfg.seed)
    try:
        sched = build_schedule(cfg, target, T)
        field = build_field(cfg, target, eps)
        kl, method = measure_kl(cfg, target, sched, field)
        bound = mt.theorem_rhs(r.kind, d, m2, sched, eps, L=r.L if r.kind == "smooth" else None)
        wall = time.perf_counter() - t0
        status, err = "ok", ""
        if wall > cfg.sweep.timeout:
            status, err = "failed", f"exceeded timeout of {cfg.sweep.timeout} s"
        return ExperimentRecord(K=sched.K, kl_measured=float(kl), kl_bound=bound.value, init_term=bound.init_term,
                                score_term=bound.score_term, stop_time=sched.stop_time, method=method,
                                status=status, error=err, wall_seconds=wall, **base)
    except Exception as exc:  # a failing point becomes a row
        nan = float("nan")
        return ExperimentRecord(K=0, kl_measured=nan, kl_bound=nan, init_term=nan, score_term=nan, stop_time=nan,
                                method="", status="failed", error=f"{type(exc).__name__}: {exc}",
                                wall_seconds=time.perf_counter() - t0, **base)


def run_sweep_kl(cfg: ExperimentConfig) -> list[ExperimentRecord]:
    points = [(cfg, float(T), float(e)) for T in cfg.sweep.T for e in cfg.sweep.eps_score]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_sweep_point, points))
    else:
        rows = [_sweep_point(p) for p in points]
    return sorted(rows, key=ExperimentRecord.sort_key)


# ---------------------------------------------------------------------------
# Sample


def run_sample(cfg: ExperimentConfig):
    target = cfg.build_target()
    sched = build_schedule(cfg, target)
    field = build_field(cfg, target)
    cmap = pick_map(field, cfg)
    run = sp.SamplerRun(sched, cmap, cfg.sampler.batch, cfg.seed, target.d, cfg.sampler.init, target,
                        cfg.sampler.trace)
    t0 = time.perf_counter()
    res = sp.run_multistep(run)
    res.meta["wall_seconds"] = time.perf_counter() - t0
    res.meta["schedule"] = sched.to_dict()
    return res


def samples_to_csv(samples: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(samples.shape[1])])
    for row in samples:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Distill


def run_distill(cfg: ExperimentConfig, *, field: ScoreField | None = None):
    dc = cfg.distill
    target = cfg.build_target()
    field = field if field is not None else build_field(cfg, target)
    if dc.align_to_schedule:
        sched = build_schedule(cfg, target)
        grid = ds.TrainGrid.from_schedule(sched, dc.refine)
        approx = ds.Approximator.for_schedule(dc.family, grid, sched, target.d, dc.ema_rate)
    else:
        grid = ds.TrainGrid.uniform(dc.t_min, dc.t_max, dc.N)
        approx = ds.Approximator.identity(dc.family, grid.knots, target.d, ema_rate=dc.ema_rate)
    rng = make_rng(cfg.seed, 0)
    res = ds.train(approx, field, target, grid, ds.OptimizerConfig(dc.lr, dc.iterations, dc.batch), rng,
                   Method(dc.solver))
    report = ds.measure_cd_error(res.approx, field, target, grid, dc.measure_batch, make_rng(cfg.seed, 1),
                                 Method(dc.solver))
    return res, grid, report


def loss_history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss"])
    for i, v in enumerate(history):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Bound checks


@dataclass
class BoundRow:
    name: str
    lhs: float
    lhs_stderr: float
    rhs: float
    satisfied: bool
    note: str = ""


BOUND_COLUMNS = [f.name for f in dataclasses.fields(BoundRow)]


def _gronwall_row(name, target, tp, hp, eps, n, rng, smooth, integrator):
    t = tp + hp
    x = tg.sample_at(target, t, n, rng)
    u = [1.0] + [0.0] * (target.d - 1)
    exact = ScoreField.exact(target)
    pert = ScoreField.perturbed(target, Perturbation.constant(u, eps))
    if target.is_gaussian:
        f, fh = ClosedFormAffine.for_field(exact), ClosedFormAffine.for_field(pert)
    else:
        f, fh = OdeOracle(exact, integrator), OdeOracle(pert, integrator)
    sq = np.sum((f.evaluate(tp, t, x) - fh.evaluate(tp, t, x)) ** 2, axis=1)
    se = float(sq.std(ddof=1) / math.sqrt(n))
    rhs = mt.gronwall_bound(hp, eps, smooth)
    return BoundRow(name, float(sq.mean()), se, rhs, bool(sq.mean() - 3 * se <= rhs), f"t'={tp}, h'={hp}, eps={eps}")


def run_check_bounds(cfg: ExperimentConfig) -> list[BoundRow]:
    b = cfg.bounds
    integ = cfg.integrator.build()
    rows = []
    rng = make_rng(cfg.seed, 10)
    rows.append(_gronwall_row("gronwall_smooth", BENCH_GAUSSIAN, 0.5, b.h_prime, b.eps, b.n_mc, rng, True, integ))
    # Without smoothness the step must satisfy h' < sigma^2_{t'} / d.
    tp = 0.3
    hp = 0.4
    rows.append(_gronwall_row("gronwall_nonsmooth", BENCH_MIXTURE, tp, hp, b.eps, b.n_mc, rng, False, integ))

    est = solver_step_error(ScoreField.exact(BENCH_GAUSSIAN), BENCH_GAUSSIAN, b.t_n, b.solver_h, b.n_mc, rng, L=1.0)
    rows.append(BoundRow("solver_step", est.mean, est.stderr, est.bound, bool(est.mean <= est.bound),
                         f"h={b.solver_h}, t_n={b.t_n}"))

    dc = cfg.distill
    grid = ds.TrainGrid.uniform(dc.t_min, dc.t_max, dc.N)
    ref_true = ClosedFormAffine(BENCH_GAUSSIAN)
    for name, eps_score in (("distill_vs_empirical", None), ("distill_vs_true", b.eps)):
        field = ScoreField.exact(BENCH_GAUSSIAN) if eps_score is None else \
            ScoreField.perturbed(BENCH_GAUSSIAN, Perturbation.constant([1.0], eps_score))
        approx = ds.Approximator.identity(dc.family, grid.knots, 1, ema_rate=dc.ema_rate)
        res = ds.train(approx, field, BENCH_GAUSSIAN, grid, ds.OptimizerConfig(dc.lr, dc.iterations, dc.batch),
                       make_rng(cfg.seed, 11), Method(dc.solver))
        rep = ds.measure_cd_error(res.approx, field, BENCH_GAUSSIAN, grid, dc.measure_batch, make_rng(cfg.seed, 12),
                                  Method(dc.solver))
        lf = ds.verify_lipschitz(res.approx, BENCH_GAUSSIAN, grid.knots[0], grid.knots[-1], 2000,
                                 make_rng(cfg.seed, 13))
        # Against the empirical map (same field) or against the true-score map.
        ref = ClosedFormAffine.for_field(field) if eps_score is None else ref_true
        gaps = ds.gap_vs_bound(res.approx, ref, BENCH_GAUSSIAN, grid, eps_cd=rep.eps_cd, L_f=lf.L_f, L=1.0,
                               batch=dc.measure_batch, rng=make_rng(cfg.seed, 14), eps_score=eps_score)
        worst = max(gaps, key=lambda g: g.gap / g.rhs)
        rows.append(BoundRow(name, worst.gap, worst.stderr, worst.rhs, all(g.satisfied for g in gaps),
                             f"worst ratio at t_n={worst.t_n:.4g}; eps_cd={rep.eps_cd:.3g}; L_f={lf.L_f:.4g}"))
    return rows


def bounds_to_csv(rows) -> str:
    return records_to_csv(rows, BOUND_COLUMNS)


# ---------------------------------------------------------------------------
# Plot data


def emit_plot_data(records, out_dir: str, *, svg: bool = False) -> list[str]:
    """Per-figure CSV files (x, y, bound) named by config hash; optional SVG plots."""
    records = [r for r in records if r.status == "ok"]
    if not records:
        raise ValueError("no successful records to plot")
    os.makedirs(out_dir, exist_ok=True)
    h = records[0].config_hash
    written = []
    figures = {}
    for eps in sorted({r.eps_score for r in records}):
        rows = sorted((r for r in records if r.eps_score == eps), key=lambda r: r.T)
        figures[f"kl_vs_T_eps{eps:g}"] = ("T", [(r.T, r.kl_measured, r.kl_bound) for r in rows])
    for T in sorted({r.T for r in records}):
        rows = sorted((r for r in records if r.T == T), key=lambda r: r.eps_score)
        if len(rows) > 1:
            figures[f"kl_vs_eps_T{T:g}"] = ("eps_score", [(r.eps_score, r.kl_measured, r.kl_bound) for r in rows])
    for name, (xname, rows) in figures.items():
        path = os.path.join(out_dir, f"{h}_{name}.csv")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([xname, "kl_measured", "kl_bound"])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
        written.append(path)
        if svg:
            written.append(_render_svg(path, xname, rows))
    return written


def _render_svg(csv_path, xname, rows):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cmlab"
    x, y, bound = (np.array(c) for c in zip(*rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(x, y, "o-", label="measured KL")
    ax.semilogy(x, bound, "--", label="bound")
    ax.set_xlabel(xname)
    ax.set_ylabel("KL")
    ax.legend()
    fig.tight_layout()
    path = csv_path[:-4] + ".svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o).__name__)
