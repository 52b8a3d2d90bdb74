"""Probability-flow ODE integration and consistency maps.

The PF-ODE ``dx/ds = -x - s_s(x)`` is always run backwards in time here. With
``tau = t_from - s`` it becomes ``dx/dtau = x + s_{t_from - tau}(x)``, which
is integrated forward in ``tau``; writing the negated field once avoids
scattering sign flips through the steppers.

A consistency map ``f(t', t, x)`` transports ``x`` at time ``t`` to time
``t' <= t`` along that flow. Three concrete maps are provided: the closed
form for a single Gaussian (optionally under a constant score offset), an
RK4 oracle over any score field, and a wrapper around learned approximators.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import targets as tg
from .metrics import solver_step_bound
from .score_field import FieldKind, PerturbationMode, ScoreField


class IntegrationError(RuntimeError):
    """Integrator missed its tolerance; ``worst`` is the largest error estimate."""

    def __init__(self, message: str, worst: float):
        super().__init__(f"{message} (worst local error estimate {worst:.3e})")
        self.worst = worst


class Method(str, enum.Enum):
    RK4 = "rk4"
    EXPONENTIAL = "exponential"
    EULER = "euler"


_ORDER = {Method.RK4: 4, Method.EXPONENTIAL: 1, Method.EULER: 1}


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-substep integrator; ``verify`` turns on a Richardson step-halving check."""

    method: Method = Method.RK4
    substep: float = 1e-3
    tolerance: float = 1e-8
    verify: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.substep > 0:
            raise ValueError("substep must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    @classmethod
    def oracle(cls, verify: bool = False) -> "IntegratorConfig":
        return cls(Method.RK4, 1e-3, 1e-8, verify)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _substep(field: ScoreField, x, s, s_next, method: Method):
    """One reverse-time substep from time ``s`` to ``s_next`` (either may be per-row)."""
    hs = s - s_next
    hc = hs[:, None] if np.ndim(hs) else hs
    if method is Method.RK4:
        s_mid = 0.5 * (s + s_next)
        k1 = x + field.evaluate(s, x)
        xm = x + 0.5 * hc * k1
        k2 = xm + field.evaluate(s_mid, xm)
        xm = x + 0.5 * hc * k2
        k3 = xm + field.evaluate(s_mid, xm)
        xe = x + hc * k3
        k4 = xe + field.evaluate(s_next, xe)
        return x + hc / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if method is Method.EXPONENTIAL:
        eh = np.exp(hc)
        return eh * x + (eh - 1.0) * field.evaluate(s, x)
    return x + hc * (x + field.evaluate(s, x))


def _integrate_fixed(field, x, t_from, t_to, n_steps, method):
    hs = (t_from - t_to) / n_steps
    s = t_from
    for i in range(1, n_steps + 1):
        # Times are recomputed from t_from (no running sum) and the last one is t_to exactly.
        s_next = t_to if i == n_steps else t_from - i * hs
        x = _substep(field, x, s, s_next, method)
        s = s_next
    return x


def integrate_trajectory(field: ScoreField, x, t_from, t_to, config: IntegratorConfig = IntegratorConfig(),
                         *, knots=None):
    """Integrate the (empirical) PF-ODE from ``t_from`` to ``t_to``.

    Usually ``t_to <= t_from`` (the generative direction); ``t_to > t_from``
    runs the same flow forward, which round-trip checks use. ``t_from`` and
    ``t_to`` may be scalars or per-row arrays; every row takes the same number
    of substeps, sized so the longest span respects ``config.substep``. With
    ``knots`` (scalar times only) the states at those times are also returned,
    in the order given.
    """
    X, single = _as_batch(x)
    t_from = np.asarray(t_from, dtype=float)
    t_to = np.asarray(t_to, dtype=float)
    if np.any(t_to < 0) or np.any(t_from < 0):
        raise ValueError("times must be >= 0")
    if t_from.ndim:
        t_from = np.broadcast_to(t_from, (X.shape[0],))
        t_to = np.broadcast_to(t_to, (X.shape[0],))
    elif t_to.ndim:
        t_to = np.broadcast_to(t_to, (X.shape[0],))
        t_from = np.broadcast_to(t_from, t_to.shape)

    if knots is not None:
        if t_from.ndim or t_to.ndim:
            raise ValueError("dense output needs scalar endpoints")
        return _integrate_dense(field, X, float(t_from), float(t_to), np.asarray(knots, dtype=float), config, single)

    span = float(np.max(np.abs(t_from - t_to))) if np.size(t_from) else 0.0
    if span == 0.0:
        return X[0].copy() if single else X.copy()
    n_steps = max(1, math.ceil(span / config.substep - 1e-9))
    out = _integrate_fixed(field, X, t_from, t_to, n_steps, config.method)
    if config.verify:
        fine = _integrate_fixed(field, X, t_from, t_to, 2 * n_steps, config.method)
        # Richardson: error of the fine solution is diff / (2^p - 1).
        est = np.abs(fine - out) / (2 ** _ORDER[config.method] - 1)
        worst = float(np.max(est / (1.0 + np.abs(fine))))
        if not worst <= config.tolerance:
            raise IntegrationError("integrator tolerance not met", worst)
        out = fine
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite state", float("inf"))
    return out[0] if single else out


def _integrate_dense(field, X, t_from, t_to, knots, config, single):
    if t_to > t_from or np.any(knots > t_from) or np.any(knots < t_to):
        raise ValueError("dense output runs backwards with knots in [t_to, t_from]")
    order = np.argsort(-knots, kind="stable")
    states = [None] * len(knots)
    cur, s = X, t_from
    for idx in order:
        cur = integrate_trajectory(field, cur, s, knots[idx], config)
        s = knots[idx]
        states[idx] = cur[0] if single else cur
    end = integrate_trajectory(field, cur, s, t_to, config)
    return (end[0] if single else end), states


def solver_step_phi(field: ScoreField, x, t_from, t_to, method=Method.EXPONENTIAL, anchor: str = "start"):
    """One solver step from ``t_from`` back to ``t_to``.

    ``exponential``: ``e^h x + (e^h - 1) s(x)``; ``euler``: ``x + h (x + s(x))``,
    the explicit Euler step of the reverse PF-ODE. The score is read at
    ``t_from`` (``anchor="start"``) or at ``t_to`` (``anchor="end"``).
    ``rk4`` takes one classical Runge-Kutta step of size h. Times may be
    per-row arrays for a batch ``x`` of shape ``(n, d)``.
    """
    method = Method(method)
    t_from = np.asarray(t_from, dtype=float)
    t_to = np.asarray(t_to, dtype=float)
    h = t_from - t_to
    if np.any(h < 0):
        raise ValueError("solver step needs t_to <= t_from")
    if anchor not in ("start", "end"):
        raise ValueError("anchor must be 'start' or 'end'")
    x = np.asarray(x, dtype=float)
    if np.all(h == 0):
        return x.copy()
    if method is Method.RK4:
        X, single = _as_batch(x)
        out = _substep(field, X, t_from, t_to, Method.RK4)
        return out[0] if single else out
    s = field.evaluate(t_from if anchor == "start" else t_to, x)
    hc = h[:, None] if h.ndim else float(h)
    if method is Method.EXPONENTIAL:
        eh = np.exp(hc)
        return eh * x + (eh - 1.0) * s
    return x + hc * (x + s)


# ---------------------------------------------------------------------------
# Consistency maps


class ConsistencyMap:
    """Base class: ``evaluate(t_prime, t, x)`` with ``t_prime <= t``."""

    is_affine = False
    domain_floor = 0.0

    def evaluate(self, t_prime, t, x):
        raise NotImplementedError

    def affine_coeffs(self, t_prime: float, t: float):
        raise TypeError(f"{type(self).__name__} is not an affine map")

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class AffineMap(ConsistencyMap):
    """Maps of the form ``a(t', t) x + b(t', t)`` with scalar a and vector b."""

    is_affine = True

    def evaluate(self, t_prime, t, x):
        x = np.asarray(x, dtype=float)
        if np.ndim(t_prime) or np.ndim(t):
            return _evaluate_rowwise(self, t_prime, t, x)
        a, b = self.affine_coeffs(float(t_prime), float(t))
        return a * x + b


def _evaluate_rowwise(m: AffineMap, t_prime, t, x):
    tp, tt = np.broadcast_arrays(np.asarray(t_prime, dtype=float), np.asarray(t, dtype=float))
    out = np.empty_like(x)
    for i in range(len(x)):
        a, b = m.affine_coeffs(float(tp[i]), float(tt[i]))
        out[i] = a * x[i] + b
    return out


class ClosedFormAffine(AffineMap):
    """Exact map for a single-Gaussian target, with an optional constant score offset.

    With marginal variance ``v_s`` and mean ``m_s`` the flow of the true score
    is ``m_{t'} + sqrt(v_{t'}/v_t) (x - m_t)``. A constant offset ``eps u`` in
    the score adds ``eps u sqrt(v_{t'}) int_{t'}^{t} v_s^{-1/2} ds``, which has
    the antiderivative ``log(e^s + sqrt(e^{2s} + c - 1))``.
    """

    def __init__(self, target: tg.TargetDistribution, offset=None):
        if not target.is_gaussian:
            raise ValueError("closed-form map needs a single-Gaussian target")
        self.target = target
        self.offset = None if offset is None else np.asarray(offset, dtype=float)
        self._c = float(target.cov_scales[0])
        self._mu = target.means[0]

    @classmethod
    def for_field(cls, field: ScoreField) -> "ClosedFormAffine":
        if field.kind is FieldKind.EXACT:
            return cls(field.target)
        if field.kind is FieldKind.PERTURBED and field.perturbation.mode is PerturbationMode.CONSTANT_DIRECTION:
            return cls(field.target, field.perturbation.magnitude * field.perturbation.direction)
        raise ValueError("no closed form for this score field")

    def _v(self, s):
        return math.exp(-2.0 * s) * self._c - math.expm1(-2.0 * s)

    def _antideriv(self, s):
        e = math.exp(s)
        return math.log(e + math.sqrt(e * e + self._c - 1.0))

    def affine_coeffs(self, t_prime: float, t: float):
        if t_prime > t:
            raise ValueError("need t_prime <= t")
        if t_prime == t:
            return 1.0, np.zeros(self.target.d)
        vp, vt = self._v(t_prime), self._v(t)
        if vt <= 0:
            raise tg.TargetError("map undefined from t = 0 on a point mass")
        a = math.sqrt(vp / vt)
        b = (math.exp(-t_prime) - a * math.exp(-t)) * self._mu
        if self.offset is not None:
            b = b + self.offset * math.sqrt(vp) * (self._antideriv(t) - self._antideriv(t_prime))
        return a, b

    def describe(self) -> dict:
        out = {"kind": "closed_form_affine", "target": self.target.to_config()}
        if self.offset is not None:
            out["offset"] = [float(v) for v in self.offset]
        return out


class CustomAffine(AffineMap):
    """Affine map from a coefficient callable; used to inject per-step errors."""

    def __init__(self, coeffs, d: int, description: str = "custom_affine"):
        self._coeffs = coeffs
        self.d = int(d)
        self._description = description

    def affine_coeffs(self, t_prime: float, t: float):
        if t_prime == t:
            return 1.0, np.zeros(self.d)
        return self._coeffs(t_prime, t)

    @classmethod
    def with_offset(cls, base: AffineMap, offset) -> "CustomAffine":
        """``base`` plus a constant vector added at every jump (but not at t' = t)."""
        offset = np.asarray(offset, dtype=float)

        def coeffs(tp, t):
            a, b = base.affine_coeffs(tp, t)
            return a, b + offset

        return cls(coeffs, len(offset), "offset")

    def describe(self) -> dict:
        return {"kind": self._description}


class OdeOracle(ConsistencyMap):
    """Consistency map by numerical integration of the PF-ODE over ``field``."""

    def __init__(self, field: ScoreField, config: IntegratorConfig = IntegratorConfig.oracle()):
        self.field = field
        self.config = config
        if field.target is not None and field.target.has_point_mass:
            self.domain_floor = np.finfo(float).tiny

    def evaluate(self, t_prime, t, x):
        if np.any(np.asarray(t_prime) < self.domain_floor) and self.domain_floor > 0:
            raise tg.TargetError("ODE oracle cannot reach t = 0 on a point-mass target")
        return integrate_trajectory(self.field, x, t, t_prime, self.config)

    def describe(self) -> dict:
        return {"kind": "ode_oracle", "field": self.field.describe(), "method": self.config.method.value,
                "substep": self.config.substep}


class LearnedMap(ConsistencyMap):
    """Wraps a distillation approximator (anything with ``evaluate(t', t, x)``)."""

    def __init__(self, approx):
        self.approx = approx
        self.is_affine = bool(getattr(approx, "is_affine", False))

    def evaluate(self, t_prime, t, x):
        return self.approx.evaluate(t_prime, t, x, use_ema=True)

    def affine_coeffs(self, t_prime: float, t: float):
        if not self.is_affine:
            raise TypeError("learned approximator is not affine")
        return self.approx.affine_coeffs(t_prime, t, use_ema=True)

    def describe(self) -> dict:
        return {"kind": "learned", "family": getattr(self.approx, "family", None)}


def consistency_eval(cmap: ConsistencyMap, t_prime, t, x):
    """``f(t', t, x)``; returns ``x`` unchanged when ``t' == t``."""
    tp = np.asarray(t_prime, dtype=float)
    tt = np.asarray(t, dtype=float)
    if np.any(tp > tt):
        raise ValueError("consistency map needs t_prime <= t")
    if np.any(tp < 0):
        raise ValueError("t_prime must be >= 0")
    x = np.asarray(x, dtype=float)
    if tp.ndim == 0 and tt.ndim == 0 and float(tp) == float(tt):
        return x.copy()
    return cmap.evaluate(t_prime, t, x)


@dataclass(frozen=True)
class StepErrorEstimate:
    h: float
    mean: float
    stderr: float
    bound: float


def solver_step_error(field: ScoreField, target: tg.TargetDistribution, t_n: float, h: float, n: int,
                      rng: np.random.Generator, *, method=Method.EXPONENTIAL, L: float | None = None,
                      oracle: IntegratorConfig = IntegratorConfig.oracle()) -> StepErrorEstimate:
    """MC estimate of ``E ||Phi(x) - x_exact||^2`` for one step of size ``h`` from ``t_n``.

    ``x ~ p_{t_n}``; the exact endpoint comes from the RK4 oracle over the same
    field. Returned with the bound ``e^h L^3 h^2 d`` (L defaults to the
    field's declared constant, else 1).
    """
    if h < 0 or h > t_n:
        raise ValueError("need 0 <= h <= t_n")
    x = tg.sample_at(target, t_n, n, rng)
    phi = solver_step_phi(field, x, t_n, t_n - h, method)
    exact = integrate_trajectory(field, x, t_n, t_n - h, oracle)
    err = np.sum((phi - exact) ** 2, axis=1)
    L = L if L is not None else (field.lipschitz if field.lipschitz is not None else 1.0)
    return StepErrorEstimate(float(h), float(err.mean()), float(err.std(ddof=1) / np.sqrt(n)),
                             solver_step_bound(h, L, target.d))
