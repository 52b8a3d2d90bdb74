"""Multi-step consistency sampling with renoising, and its closed-form shadows.

``run_multistep`` alternates a backward consistency jump ``t_k -> t'_{k-1}``
with forward OU renoising ``t'_{k-1} -> t_{k-1}``. Two exact companions make
the output law computable without Monte Carlo: ``gaussian_pushforward`` for
affine maps on single-Gaussian targets, and ``density_pushforward_1d`` which
carries a 1-D density through arbitrary monotone maps by quadrature.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import targets as tg
from .forward_process import Schedule, make_rng, ou_transition, renoise
from .pf_ode import ClosedFormAffine, ConsistencyMap, consistency_eval
from .score_field import ScoreField

BLOCK_SIZE = 8192
# Default cap on stored trace entries (floats) when per-step traces are requested.
TRACE_CAP = 50_000_000


class Init(str, enum.Enum):
    STANDARD_NORMAL = "standard_normal"
    EXACT_TERMINAL = "exact_terminal"


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerRun:
    schedule: Schedule
    cmap: ConsistencyMap
    batch: int
    seed: int
    d: int
    init: Init = Init.STANDARD_NORMAL
    target: tg.TargetDistribution | None = None
    trace: bool = False
    trace_cap: int = TRACE_CAP

    def __post_init__(self):
        object.__setattr__(self, "init", Init(self.init))
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.init is Init.EXACT_TERMINAL and self.target is None:
            raise ValueError("exact_terminal init needs the target")
        if self.trace and (self.schedule.K + 1) * self.batch * self.d > self.trace_cap:
            raise ValueError("trace would exceed the configured memory cap")
        floor = getattr(self.cmap, "domain_floor", 0.0)
        if float(np.min(self.schedule.t_prime)) < floor:
            raise ValueError(f"schedule reaches t' = {np.min(self.schedule.t_prime)} below the map's domain")


@dataclass
class SamplerResult:
    samples: np.ndarray
    stop_time: float
    trace: list | None = None
    trace_times: list | None = None
    meta: dict = field(default_factory=dict)


def _initial_block(run: SamplerRun, n: int, rng: np.random.Generator) -> np.ndarray:
    if run.init is Init.STANDARD_NORMAL:
        return rng.standard_normal((n, run.d))
    return tg.sample_at(run.target, run.schedule.T, n, rng)


def _run_block(run: SamplerRun, n: int, rng: np.random.Generator, trace: list | None):
    sched = run.schedule
    x = _initial_block(run, n, rng)
    if trace is not None:
        trace.append(x.copy())
    for k in range(sched.K, 0, -1):
        tp, t_k, t_prev = float(sched.t_prime[k - 1]), float(sched.t[k]), float(sched.t[k - 1])
        try:
            # The iterate is x_hat_k, the current state.
            x = consistency_eval(run.cmap, tp, t_k, x)
        except Exception as exc:
            raise SamplerError(f"map evaluation failed at step k={k}: {exc}") from exc
        if not np.all(np.isfinite(x)):
            raise SamplerError(f"non-finite state after the jump at step k={k}")
        if k == 1 and sched.stops_at_t_prime:
            if trace is not None:
                trace.append(x.copy())
            break
        x = renoise(x, tp, t_prev, rng)
        if trace is not None:
            trace.append(x.copy())
    return x


def run_multistep(run: SamplerRun) -> SamplerResult:
    """Multi-step consistency generation.

    Samples are processed in blocks of ``BLOCK_SIZE``; block ``i`` draws all its
    randomness from the stream ``(seed, i)``, so any trajectory is reproducible
    from the master seed and its index.
    """
    n_blocks = math.ceil(run.batch / BLOCK_SIZE)
    outs, traces = [], [] if run.trace else None
    for b in range(n_blocks):
        n = min(BLOCK_SIZE, run.batch - b * BLOCK_SIZE)
        tr = [] if run.trace else None
        outs.append(_run_block(run, n, make_rng(run.seed, b), tr))
        if run.trace:
            traces.append(tr)
    trace = trace_times = None
    sched = run.schedule
    if run.trace:
        trace = [np.concatenate([blk[i] for blk in traces]) for i in range(len(traces[0]))]
        trace_times = [float(v) for v in sched.t[::-1]]
        if sched.stops_at_t_prime:
            trace_times[-1] = float(sched.t_prime[0])
    return SamplerResult(np.concatenate(outs), sched.stop_time, trace, trace_times,
                         {"K": sched.K, "batch": run.batch, "seed": run.seed, "map": run.cmap.describe()})


def run_true_counterpart(schedule: Schedule, target: tg.TargetDistribution, batch: int, seed: int, *,
                         cmap: ConsistencyMap | None = None, trace: bool = False) -> SamplerResult:
    """The exact-score sampler started from the true terminal law.

    Its output law is exactly ``p`` at the stop time. ``cmap`` defaults to the
    closed form for Gaussian targets and must be an exact-score map otherwise.
    """
    if cmap is None:
        if not target.is_gaussian:
            raise ValueError("pass an exact-score map (e.g. OdeOracle) for mixture targets")
        cmap = ClosedFormAffine(target)
    run = SamplerRun(schedule, cmap, batch, seed, target.d, Init.EXACT_TERMINAL, target, trace)
    return run_multistep(run)


@dataclass(frozen=True)
class GaussianLaw:
    mean: np.ndarray
    var: float


@dataclass
class Pushforward:
    law: GaussianLaw
    stop_time: float
    laws: list  # GaussianLaw after each stage, starting with the initial law
    times: list


def gaussian_pushforward(schedule: Schedule, cmap: ConsistencyMap, d: int, init=Init.STANDARD_NORMAL,
                         target: tg.TargetDistribution | None = None) -> Pushforward:
    """Exact output law of the sampler for affine maps and Gaussian inputs.

    Each jump ``a x + b`` and renoise ``(shrink, noise_std)`` maps
    ``(mean, var)`` to ``(shrink (a mean + b), shrink^2 a^2 var + noise_std^2)``.
    """
    init = Init(init)
    if not getattr(cmap, "is_affine", False):
        raise TypeError("gaussian_pushforward needs an affine map")
    if init is Init.STANDARD_NORMAL:
        mean, var = np.zeros(d), 1.0
    else:
        if target is None or not target.is_gaussian:
            raise ValueError("exact_terminal pushforward needs a single-Gaussian target")
        m, v = tg.marginal_params(target, schedule.T)
        mean, var = m[0].copy(), float(v[0])
    laws, times = [GaussianLaw(mean, var)], [schedule.T]
    for k in range(schedule.K, 0, -1):
        tp, t_k, t_prev = float(schedule.t_prime[k - 1]), float(schedule.t[k]), float(schedule.t[k - 1])
        a, b = cmap.affine_coeffs(tp, t_k)
        mean, var = a * mean + b, a * a * var
        if k == 1 and schedule.stops_at_t_prime:
            laws.append(GaussianLaw(mean, var))
            times.append(tp)
            break
        tr = ou_transition(tp, t_prev)
        mean, var = tr.shrink * mean, tr.shrink ** 2 * var + tr.noise_std ** 2
        laws.append(GaussianLaw(mean, var))
        times.append(t_prev)
    return Pushforward(laws[-1], schedule.stop_time, laws, times)


def true_law(target: tg.TargetDistribution, t: float) -> GaussianLaw:
    m, v = tg.marginal_params(target, t)
    return GaussianLaw(m[0].copy(), float(v[0]))


# ---------------------------------------------------------------------------
# 1-D density propagation


@dataclass
class DensityPushforward:
    """Output density of the sampler in 1-D, as a callable log-density."""

    stop_time: float
    nodes: np.ndarray
    log_density_nodes: np.ndarray
    mass: float

    def log_density(self, y):
        y = np.asarray(y, dtype=float)
        spline = CubicSpline(self.nodes, self.log_density_nodes)
        out = spline(np.clip(y, self.nodes[0], self.nodes[-1]))
        # Gaussian-tail extrapolation beyond the node range.
        lo, hi = self.nodes[0], self.nodes[-1]
        out = np.where(y < lo, spline(lo) + spline(lo, 1) * (y - lo) - 0.5 * (y - lo) ** 2, out)
        out = np.where(y > hi, spline(hi) + spline(hi, 1) * (y - hi) - 0.5 * (y - hi) ** 2, out)
        return out


def _trapezoid_weights(x):
    w = np.empty_like(x)
    dx = np.diff(x)
    w[0], w[-1] = dx[0] / 2, dx[-1] / 2
    w[1:-1] = (dx[:-1] + dx[1:]) / 2
    return w


def density_pushforward_1d(schedule: Schedule, cmap: ConsistencyMap, *, init=Init.STANDARD_NORMAL,
                           target: tg.TargetDistribution | None = None, n_grid: int = 2001,
                           width: float = 10.0, fd_step: float = 1e-5) -> DensityPushforward:
    """Propagate the sampler's 1-D density exactly up to quadrature error.

    The density is carried on a grid of pre-jump points ``x_j``. Renoising
    after a jump is a Gaussian convolution, evaluated in the pre-jump variable
    so no Jacobian is needed: ``p_new(z) = sum_j w_j p(x_j) N(z; c f(x_j), s^2)``.
    The final jump (no renoise when stopping at ``t'_0``) uses the Jacobian
    ``f'`` from central differences.
    """
    init = Init(init)

    def grid_for(t):
        if target is not None:
            lo, hi = tg.quadrature_bounds(tg.marginal_at(target, t), width)
            lo, hi = min(lo, -width), max(hi, width)
        else:
            lo, hi = -width, width
        return np.linspace(lo, hi, n_grid)

    x = grid_for(schedule.T)
    if init is Init.STANDARD_NORMAL:
        logp = -0.5 * x * x - 0.5 * math.log(2 * math.pi)
    else:
        logp = tg.log_density(target, schedule.T, x[:, None])
    for k in range(schedule.K, 0, -1):
        tp, t_k, t_prev = float(schedule.t_prime[k - 1]), float(schedule.t[k]), float(schedule.t[k - 1])
        if k == 1 and schedule.stops_at_t_prime:
            X = np.concatenate([x, x - fd_step, x + fd_step])[:, None]
            F = consistency_eval(cmap, tp, t_k, X)[:, 0]
            n = len(x)
            y, jac = F[:n], (F[2 * n:] - F[n:2 * n]) / (2 * fd_step)
            if np.any(jac <= 0):
                raise SamplerError("final map is not monotone on the grid")
            order = np.argsort(y)
            logq = (logp - np.log(jac))[order]
            mass = float(np.trapezoid(np.exp(logq), y[order]))
            return DensityPushforward(tp, y[order], logq, mass)
        y = consistency_eval(cmap, tp, t_k, x[:, None])[:, 0]
        tr = ou_transition(tp, t_prev)
        z = grid_for(t_prev)
        wp = _trapezoid_weights(x) * np.exp(logp)
        var = tr.noise_std ** 2
        kern = -0.5 * (z[:, None] - tr.shrink * y[None, :]) ** 2 / var
        top = kern.max(axis=1, keepdims=True)
        dens = (np.exp(kern - top) @ wp) / math.sqrt(2 * math.pi * var)
        with np.errstate(divide="ignore"):
            logp = np.log(dens) + top[:, 0]
        x = z
    mass = float(np.trapezoid(np.exp(logp), x))
    return DensityPushforward(schedule.t[0], x, logp, mass)


def exact_score_map_for(field: ScoreField):
    """Closed-form map when available, else ``None``."""
    try:
        return ClosedFormAffine.for_field(field)
    except ValueError:
        return None
