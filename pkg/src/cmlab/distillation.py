"""Consistency distillation of low-capacity approximators on a knot grid.

An approximator stores one map per (anchor knot, source knot) pair:

    f(t_a, t_n, x) = scale[j, n] x + offset[j, n] + radial[j, n] rho(||x||) x

with ``rho(r) = r^2 / (1 + r^2)`` (the radial term is only trained in the
``feature_linear`` family). Pairs with ``n == a`` are the identity by
construction, so the boundary condition holds for every parameter value.

Training minimises the distillation loss between the online output at
``t_{n+1}`` and the EMA-target output at the solver-stepped point ``t_n``.
For Gaussian targets and the affine family the loss is an exact quadratic
with a known minimiser, which makes the bounds checkable without noise.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import targets as tg
from .forward_process import Schedule
from .metrics import map_gap_bound, map_gap_bound_true
from .pf_ode import ConsistencyMap, Method, integrate_trajectory, IntegratorConfig, solver_step_phi
from .score_field import ScoreField

DIVERGENCE_LIMIT = 1e6


class Family(str, enum.Enum):
    AFFINE = "affine_per_pair"
    FEATURE = "feature_linear"


class TrainingDiverged(RuntimeError):
    pass


def _rho(x):
    r2 = np.sum(x * x, axis=-1)
    return r2 / (1.0 + r2)


def _find_knot(knots, t, what):
    idx = int(np.searchsorted(knots, t))
    for cand in (idx - 1, idx):
        if 0 <= cand < len(knots) and abs(knots[cand] - t) <= 1e-12 * max(1.0, abs(t)):
            return cand
    raise KeyError(f"{what} {t!r} is not a training knot")


@dataclass
class TrainGrid:
    """Training knots ``t_1 < ... < t_N`` with weights ``lambda`` per interval."""

    knots: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        if len(self.knots) < 2:
            raise ValueError("need at least two knots")
        if not np.all(np.diff(self.knots) > 0):
            raise ValueError("knots must be strictly increasing")
        if self.knots[0] < 0:
            raise ValueError("knots must be >= 0")
        if self.weights is None:
            self.weights = np.ones(len(self.knots) - 1)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.knots) - 1,) or np.any(self.weights <= 0):
            raise ValueError("need one positive weight per knot interval")

    @property
    def N(self) -> int:
        return len(self.knots)

    @property
    def spacing(self) -> float:
        return float(np.max(np.diff(self.knots)))

    @classmethod
    def uniform(cls, t_min: float, t_max: float, N: int) -> "TrainGrid":
        return cls(np.linspace(t_min, t_max, N))

    @classmethod
    def from_schedule(cls, schedule: Schedule, refine: int = 1) -> "TrainGrid":
        """Knots containing every ``t_k`` and ``t'_k``, each interval split ``refine`` times."""
        base = np.unique(np.concatenate([schedule.t, schedule.t_prime]))
        if refine < 1:
            raise ValueError("refine must be >= 1")
        pieces = [np.linspace(a, b, refine + 1)[:-1] for a, b in zip(base[:-1], base[1:])]
        return cls(np.concatenate(pieces + [base[-1:]]))


@dataclass
class Approximator:
    family: Family
    knots: np.ndarray
    anchors: np.ndarray  # knot indices used as the first argument t'
    d: int
    scale: np.ndarray  # (J, N)
    offset: np.ndarray  # (J, N, d)
    radial: np.ndarray  # (J, N)
    ema_rate: float = 0.9
    limits: np.ndarray | None = None  # last trained knot index per anchor
    ema_scale: np.ndarray = field(default=None, repr=False)
    ema_offset: np.ndarray = field(default=None, repr=False)
    ema_radial: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.family = Family(self.family)
        self.knots = np.asarray(self.knots, dtype=float)
        self.anchors = np.asarray(self.anchors, dtype=int)
        if not 0 <= self.ema_rate <= 1:
            raise ValueError("ema_rate must lie in [0, 1]")
        J, N = len(self.anchors), len(self.knots)
        self.limits = np.full(J, N - 1) if self.limits is None else np.asarray(self.limits, dtype=int)
        if self.limits.shape != (J,) or np.any(self.limits <= self.anchors) or np.any(self.limits >= N):
            raise ValueError("each limit must lie in (anchor, N - 1]")
        if self.scale.shape != (J, N) or self.offset.shape != (J, N, self.d) or self.radial.shape != (J, N):
            raise ValueError("parameter shapes do not match anchors and knots")
        # Entries with n <= anchor are not parameters; pin them to the identity.
        n = np.arange(N)[None, :]
        self._mask = (n > self.anchors[:, None]) & (n <= self.limits[:, None])
        self._pin(self.scale, self.offset, self.radial)
        if self.ema_scale is None:
            self.ema_scale, self.ema_offset, self.ema_radial = self.scale.copy(), self.offset.copy(), self.radial.copy()
        self._pin(self.ema_scale, self.ema_offset, self.ema_radial)

    def _pin(self, scale, offset, radial):
        scale[~self._mask] = 1.0
        offset[~self._mask] = 0.0
        radial[~self._mask] = 0.0

    @property
    def is_affine(self) -> bool:
        return self.family is Family.AFFINE

    @classmethod
    def identity(cls, family, knots, d: int, anchors=(0,), ema_rate: float = 0.9, limits=None) -> "Approximator":
        knots = np.asarray(knots, dtype=float)
        J, N = len(anchors), len(knots)
        return cls(Family(family), knots, np.asarray(anchors, dtype=int), d,
                   np.ones((J, N)), np.zeros((J, N, d)), np.zeros((J, N)), ema_rate, limits)

    @classmethod
    def for_schedule(cls, family, grid: "TrainGrid", schedule: Schedule, d: int,
                     ema_rate: float = 0.9) -> "Approximator":
        """Identity-initialised approximator covering the sampler jumps ``(t'_{k-1}, t_k)``."""
        anchors = [_find_knot(grid.knots, float(tp), "t'") for tp in schedule.t_prime]
        limits = [_find_knot(grid.knots, float(t), "t") for t in schedule.t[1:]]
        return cls.identity(family, grid.knots, d, anchors, ema_rate, limits)

    @classmethod
    def random(cls, family, knots, d: int, rng: np.random.Generator, anchors=(0,), ema_rate: float = 0.9,
               spread: float = 0.5, limits=None) -> "Approximator":
        a = cls.identity(family, knots, d, anchors, ema_rate, limits)
        a.scale = a.scale + spread * rng.standard_normal(a.scale.shape)
        a.offset = a.offset + spread * rng.standard_normal(a.offset.shape)
        if a.family is Family.FEATURE:
            a.radial = a.radial + spread * rng.standard_normal(a.radial.shape)
        a._pin(a.scale, a.offset, a.radial)
        a.ema_scale, a.ema_offset, a.ema_radial = a.scale.copy(), a.offset.copy(), a.radial.copy()
        return a

    @classmethod
    def from_map(cls, cmap: ConsistencyMap, knots, d: int, anchors=(0,), ema_rate: float = 0.9,
                 family=Family.AFFINE) -> "Approximator":
        """Initialise from an affine map's coefficients at every (anchor, knot) pair."""
        a = cls.identity(family, knots, d, anchors, ema_rate)
        for j, ai in enumerate(a.anchors):
            for n in range(ai + 1, a.limits[j] + 1):
                s, b = cmap.affine_coeffs(float(a.knots[ai]), float(a.knots[n]))
                a.scale[j, n], a.offset[j, n] = s, b
        a.ema_scale, a.ema_offset = a.scale.copy(), a.offset.copy()
        return a

    def copy(self) -> "Approximator":
        return Approximator(self.family, self.knots.copy(), self.anchors.copy(), self.d, self.scale.copy(),
                            self.offset.copy(), self.radial.copy(), self.ema_rate, self.limits.copy(),
                            self.ema_scale.copy(),
                            self.ema_offset.copy(), self.ema_radial.copy())

    # -- parameter vector ---------------------------------------------------

    def get_params(self) -> np.ndarray:
        parts = [self.scale[self._mask], self.offset[self._mask].ravel()]
        if self.family is Family.FEATURE:
            parts.append(self.radial[self._mask])
        return np.concatenate(parts)

    def set_params(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        m = int(self._mask.sum())
        self.scale[self._mask] = vec[:m]
        self.offset[self._mask] = vec[m:m + m * self.d].reshape(m, self.d)
        if self.family is Family.FEATURE:
            self.radial[self._mask] = vec[m + m * self.d:]

    def update_ema(self) -> None:
        mu = self.ema_rate
        self.ema_scale = mu * self.ema_scale + (1 - mu) * self.scale
        self.ema_offset = mu * self.ema_offset + (1 - mu) * self.offset
        self.ema_radial = mu * self.ema_radial + (1 - mu) * self.radial

    # -- evaluation ---------------------------------------------------------

    def _index(self, t_prime, t):
        ki = _find_knot(self.knots, float(t_prime), "t'")
        hits = np.nonzero(self.anchors == ki)[0]
        if not len(hits):
            raise KeyError(f"t' = {t_prime!r} is not a trained anchor")
        n = _find_knot(self.knots, float(t), "t")
        if n < ki:
            raise ValueError("need t' <= t")
        if n > self.limits[hits[0]]:
            raise KeyError(f"t = {t!r} is beyond the trained range for t' = {t_prime!r}")
        return int(hits[0]), n

    def _params(self, use_ema):
        if use_ema:
            return self.ema_scale, self.ema_offset, self.ema_radial
        return self.scale, self.offset, self.radial

    def affine_coeffs(self, t_prime, t, use_ema: bool = False):
        if not self.is_affine:
            raise TypeError("feature_linear approximators are not affine")
        j, n = self._index(t_prime, t)
        s, b, _ = self._params(use_ema)
        return float(s[j, n]), b[j, n].copy()

    def evaluate(self, t_prime, t, x, use_ema: bool = False):
        x = np.asarray(x, dtype=float)
        j, n = self._index(t_prime, t)
        return self._apply(j, n, x, use_ema)

    def _apply(self, j, n, x, use_ema):
        s, b, c = self._params(use_ema)
        if np.ndim(n):
            out = s[j, n][:, None] * x + b[j, n]
            if self.family is Family.FEATURE:
                out = out + (c[j, n] * _rho(x))[:, None] * x
            return out
        out = s[j, n] * x + b[j, n]
        if self.family is Family.FEATURE:
            out = out + (c[j, n] * _rho(x))[..., None] * x
        return out

    # -- serialisation ------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({
            "format": "cmlab-approximator", "version": 1, "family": self.family.value,
            "d": self.d, "ema_rate": self.ema_rate,
            "knots": [float(v) for v in self.knots], "anchors": [int(v) for v in self.anchors],
            "limits": [int(v) for v in self.limits],
            "params": {k: getattr(self, k).tolist() for k in
                       ("scale", "offset", "radial", "ema_scale", "ema_offset", "ema_radial")},
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Approximator":
        obj = json.loads(text)
        if obj.get("format") != "cmlab-approximator":
            raise ValueError("not a serialized approximator")
        p = {k: np.asarray(v, dtype=float) for k, v in obj["params"].items()}
        return cls(Family(obj["family"]), np.asarray(obj["knots"]), np.asarray(obj["anchors"], dtype=int),
                   int(obj["d"]), p["scale"], p["offset"], p["radial"], float(obj["ema_rate"]),
                   np.asarray(obj["limits"], dtype=int), p["ema_scale"], p["ema_offset"], p["ema_radial"])


# ---------------------------------------------------------------------------
# Loss and training


def _pairs(approx: Approximator):
    """(anchor row j, source knot n) for every loss term, comparing n+1 against n."""
    js, ns = [], []
    for j, (a, lim) in enumerate(zip(approx.anchors, approx.limits)):
        for n in range(a, lim):
            js.append(j)
            ns.append(n)
    return np.asarray(js, dtype=int), np.asarray(ns, dtype=int)


@dataclass
class CdLoss:
    value: float
    grad: np.ndarray


def _check_grid(approx, grid):
    if len(grid.knots) != len(approx.knots) or not np.array_equal(grid.knots, approx.knots):
        raise ValueError("approximator knots differ from the training grid")


def cd_loss(approx: Approximator, field: ScoreField, target: tg.TargetDistribution, grid: TrainGrid, batch: int,
            rng: np.random.Generator, solver=Method.EXPONENTIAL, anchor: str = "start") -> CdLoss:
    """Distillation loss and its gradient with respect to the online parameters.

    Every (anchor, n) pair contributes ``lambda_n E||f_theta(t_a, t_{n+1}, x)
    - f_ema(t_a, t_n, Phi(x))||^2`` with ``x ~ p_{t_{n+1}}`` drawn through the
    forward process; the loss is the mean over pairs. The EMA parameters are
    held fixed.
    """
    _check_grid(approx, grid)
    if approx.knots[0] == 0 and target.has_point_mass:
        raise ValueError("the first knot must be > 0 for point-mass targets")
    js, ns = _pairs(approx)
    P, B, d = len(js), batch, approx.d
    t_next = np.repeat(grid.knots[ns + 1], B)
    t_cur = np.repeat(grid.knots[ns], B)
    jj, nn = np.repeat(js, B), np.repeat(ns, B)
    x0 = tg.sample(target, P * B, rng)
    z = rng.standard_normal((P * B, d))
    x = np.exp(-t_next)[:, None] * x0 + np.sqrt(-np.expm1(-2.0 * t_next))[:, None] * z
    x_phi = solver_step_phi(field, x, t_next, t_cur, solver, anchor)
    pred = approx._apply(jj, nn + 1, x, use_ema=False)
    tgt = approx._apply(jj, nn, x_phi, use_ema=True)
    r = pred - tgt
    lam = np.repeat(grid.weights[ns], B)
    per_row = lam * np.sum(r * r, axis=1)
    per_pair = per_row.reshape(P, B).mean(axis=1)
    if not np.all(np.isfinite(per_pair)):
        bad = int(ns[np.argmax(~np.isfinite(per_pair))])
        raise FloatingPointError(f"non-finite distillation loss at knot index {bad}")
    value = float(per_pair.mean())

    coef = (2.0 / (P * B)) * lam  # d value / d pred, per row
    g_scale = np.zeros_like(approx.scale)
    g_offset = np.zeros_like(approx.offset)
    g_radial = np.zeros_like(approx.radial)
    np.add.at(g_scale, (jj, nn + 1), coef * np.sum(r * x, axis=1))
    np.add.at(g_offset, (jj, nn + 1), coef[:, None] * r)
    if approx.family is Family.FEATURE:
        np.add.at(g_radial, (jj, nn + 1), coef * _rho(x) * np.sum(r * x, axis=1))
    mask = approx._mask
    parts = [g_scale[mask], g_offset[mask].ravel()]
    if approx.family is Family.FEATURE:
        parts.append(g_radial[mask])
    return CdLoss(value, np.concatenate(parts))


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain gradient descent. ``lr`` is a per-pair step: the mean-over-pairs
    gradient is multiplied by the number of pairs so the step does not shrink
    as the grid is refined."""

    lr: float = 0.1
    iterations: int = 2000
    batch: int = 64

    def __post_init__(self):
        if not self.lr > 0 or self.iterations < 0 or self.batch < 1:
            raise ValueError("need lr > 0, iterations >= 0, batch >= 1")


@dataclass
class TrainResult:
    approx: Approximator
    loss_history: np.ndarray


def train(approx: Approximator, field: ScoreField, target: tg.TargetDistribution, grid: TrainGrid,
          opt: OptimizerConfig, rng: np.random.Generator, solver=Method.EXPONENTIAL,
          anchor: str = "start") -> TrainResult:
    """Gradient descent on the distillation loss with an EMA target after each step."""
    approx = approx.copy()
    n_pairs = len(_pairs(approx)[0])
    history = np.empty(opt.iterations)
    theta = approx.get_params()
    for it in range(opt.iterations):
        loss = cd_loss(approx, field, target, grid, opt.batch, rng, solver, anchor)
        if not loss.value <= DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"loss {loss.value:.3e} exceeded {DIVERGENCE_LIMIT:g} at iteration {it}")
        history[it] = loss.value
        theta = theta - opt.lr * n_pairs * loss.grad
        approx.set_params(theta)
        approx.update_ema()
    return TrainResult(approx, history)


# ---------------------------------------------------------------------------
# Measurements


@dataclass
class CdErrorReport:
    knots: np.ndarray  # source knots t_{n+1}
    normalized: np.ndarray  # E||.||^2 / h^2 per pair
    stderr: np.ndarray
    eps_cd: float


def measure_cd_error(approx: Approximator, field: ScoreField, target: tg.TargetDistribution, grid: TrainGrid,
                     batch: int, rng: np.random.Generator, solver=Method.EXPONENTIAL, anchor_row: int = 0,
                     use_ema: bool = False) -> CdErrorReport:
    """Adjacent-knot residual ``E||f(t', t_{n+1}, x) - f(t', t_n, Phi(x))||^2 / h_n^2``.

    ``eps_cd`` is the largest square root over knots. ``solver="rk4"`` uses
    the ODE oracle in place of the one-step solver.
    """
    _check_grid(approx, grid)
    a = int(approx.anchors[anchor_row])
    tp = grid.knots[a]
    knots, vals, errs = [], [], []
    oracle = IntegratorConfig.oracle()
    for n in range(a, int(approx.limits[anchor_row])):
        t0, t1 = grid.knots[n], grid.knots[n + 1]
        x = tg.sample_at(target, t1, batch, rng)
        if Method(solver) is Method.RK4:
            x_phi = integrate_trajectory(field, x, t1, t0, oracle)
        else:
            x_phi = solver_step_phi(field, x, t1, t0, solver)
        lhs = approx.evaluate(tp, t1, x, use_ema)
        rhs = approx.evaluate(tp, t0, x_phi, use_ema)
        sq = np.sum((lhs - rhs) ** 2, axis=1) / (t1 - t0) ** 2
        knots.append(t1)
        vals.append(sq.mean())
        errs.append(sq.std(ddof=1) / math.sqrt(batch))
    vals = np.asarray(vals)
    return CdErrorReport(np.asarray(knots), vals, np.asarray(errs), float(np.sqrt(vals.max())))


@dataclass(frozen=True)
class MapGap:
    mean_abs: float
    mean_sq: float
    stderr: float


def measure_map_gap(approx: Approximator, reference: ConsistencyMap, target: tg.TargetDistribution,
                    t_prime: float, t_n: float, batch: int, rng: np.random.Generator,
                    use_ema: bool = False) -> MapGap:
    """``E||f_ref(t', t_n, x) - f_theta(t', t_n, x)||`` for ``x ~ p_{t_n}``."""
    x = tg.sample_at(target, t_n, batch, rng)
    diff = np.linalg.norm(reference.evaluate(t_prime, t_n, x) - approx.evaluate(t_prime, t_n, x, use_ema), axis=1)
    return MapGap(float(diff.mean()), float(np.mean(diff ** 2)), float(diff.std(ddof=1) / math.sqrt(batch)))


@dataclass(frozen=True)
class LipschitzCheck:
    L_f: float
    bound: float

    @property
    def satisfied(self) -> bool:
        return self.L_f <= self.bound


def verify_lipschitz(approx, target: tg.TargetDistribution, t_prime: float, t: float, n: int,
                     rng: np.random.Generator, L: float = 1.0, local_scale: float = 1e-3,
                     use_ema: bool = False) -> LipschitzCheck:
    """Largest observed ``||f(x) - f(y)|| / ||x - y||`` against ``e^{(1+L)(t-t')}``.

    ``approx`` may be an Approximator or any ConsistencyMap.
    """
    if isinstance(approx, Approximator):
        def f(z):
            return approx.evaluate(t_prime, t, z, use_ema)
    else:
        def f(z):
            return approx.evaluate(t_prime, t, z)
    x = tg.sample_at(target, t, n, rng)
    scale = math.sqrt(tg.marginal_at(target, t).total_variance())
    fx = f(x)
    worst = 0.0
    for y in (tg.sample_at(target, t, n, rng), x + local_scale * scale * rng.standard_normal(x.shape)):
        dx = np.linalg.norm(x - y, axis=1)
        ok = dx > 0
        worst = max(worst, float(np.max(np.linalg.norm(fx - f(y), axis=1)[ok] / dx[ok])))
    return LipschitzCheck(worst, math.exp((1.0 + L) * (t - t_prime)))


@dataclass(frozen=True)
class ContractionReport:
    lhs: float
    rhs: float

    @property
    def satisfied(self) -> bool:
        return self.lhs <= self.rhs


def contraction_report(approx: Approximator, target: tg.TargetDistribution, t_prime: float, t_n: float,
                       n_index: int, t_1: float, eps_cd: float, eps_score: float, n: int,
                       rng: np.random.Generator) -> ContractionReport:
    """Expected-contraction check without score smoothness.

    ``E||f(x) - f(y)||`` against ``2 (t_n - t_1) eps_cd + 2 eps_score (t_n - t_1)
    + n E||x - y||`` for independent ``x, y ~ p_{t_n}``.
    """
    x = tg.sample_at(target, t_n, n, rng)
    y = tg.sample_at(target, t_n, n, rng)
    lhs = float(np.mean(np.linalg.norm(approx.evaluate(t_prime, t_n, x) - approx.evaluate(t_prime, t_n, y), axis=1)))
    span = t_n - t_1
    rhs = 2 * span * eps_cd + 2 * eps_score * span + n_index * float(np.mean(np.linalg.norm(x - y, axis=1)))
    return ContractionReport(lhs, rhs)


@dataclass(frozen=True)
class GapBoundRow:
    t_n: float
    n_index: int
    gap: float
    stderr: float
    rhs: float

    @property
    def satisfied(self) -> bool:
        return self.gap <= self.rhs


def gap_vs_bound(approx: Approximator, reference: ConsistencyMap, target: tg.TargetDistribution,
                 grid: TrainGrid, *, eps_cd: float, L_f: float, L: float, batch: int, rng: np.random.Generator,
                 eps_score: float | None = None, anchor_row: int = 0) -> list[GapBoundRow]:
    """Map gap at every source knot against the distilled-map bound.

    With ``eps_score=None`` the bound against the empirical map is used
    (``L_f e^{h/2} L^{3/2} d^{1/2} h + eps_cd (t_n - t_1)``); otherwise the
    bound against the true map, which adds the score error.
    """
    a = int(approx.anchors[anchor_row])
    tp, t_1, h = grid.knots[a], grid.knots[a], grid.spacing
    rows = []
    for n in range(a + 1, int(approx.limits[anchor_row]) + 1):
        t_n = float(grid.knots[n])
        g = measure_map_gap(approx, reference, target, tp, t_n, batch, rng)
        k = n - a + 1  # 1-based position of t_n counted from t_1
        if eps_score is None:
            rhs = map_gap_bound(L_f, h, L, target.d, eps_cd, t_n, t_1)
        else:
            rhs = map_gap_bound_true(k, h, L, target.d, eps_cd, eps_score, t_n, t_1)
        rows.append(GapBoundRow(t_n, k, g.mean_abs, g.stderr, float(rhs)))
    return rows
