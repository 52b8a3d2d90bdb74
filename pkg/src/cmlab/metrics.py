"""KL divergences, quadrature KL for 1-D laws, and theorem right-hand sides.

Every bound keeps its explicit constants (``e**2``, ``e**4``, the 1/4 in the
gap sum) so inequalities can be checked exactly as stated rather than up to
``O(.)`` factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .forward_process import Regime, Schedule


def _x_minus_log1p(x):
    """``x - log(1 + x)`` without cancellation near 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    series = x * x * (0.5 - x * (1.0 / 3.0 - x * (0.25 - x * (0.2 - x / 6.0))))
    with np.errstate(invalid="ignore", divide="ignore"):
        direct = x - np.log1p(x)
    return np.where(small, series, direct)


def kl_gaussian(mean_a, var_a: float, mean_b, var_b: float, d: int | None = None) -> float:
    """``KL(N(mean_a, var_a I) || N(mean_b, var_b I))``.

    Means may be vectors or scalars (then ``d`` sets the dimension and the
    scalar is read as every coordinate's mean).
    """
    if not (var_a > 0 and var_b > 0):
        raise ValueError("variances must be positive")
    mean_a = np.atleast_1d(np.asarray(mean_a, dtype=float))
    mean_b = np.atleast_1d(np.asarray(mean_b, dtype=float))
    if d is None:
        d = max(len(mean_a), len(mean_b))
    diff = np.broadcast_to(mean_b - mean_a, (d,))
    ratio_term = 0.5 * d * float(_x_minus_log1p(var_a / var_b - 1.0))
    return ratio_term + 0.5 * float(diff @ diff) / var_b


def kl_conditional_step(f_out, fhat_out, t_prime: float, t_prev: float):
    """KL between the two renoise kernels started from ``f_out`` and ``fhat_out``.

    Equals ``e^{2(t'-t)} ||f - fhat||^2 / (2 (1 - e^{2(t'-t)}))``. Accepts a
    batch of rows, returning one value per row.
    """
    if not t_prime < t_prev:
        raise ValueError("need t_prime < t_prev (the renoise variance would be 0)")
    diff = np.asarray(f_out, dtype=float) - np.asarray(fhat_out, dtype=float)
    sq = np.sum(diff * diff, axis=-1)
    return sq / (2.0 * math.expm1(2.0 * (t_prev - t_prime)))


def kl_chain_upper_bound(step_kls, terminal_kl: float = 0.0) -> float:
    """Terminal KL plus the per-step conditional KLs (chain rule upper bound)."""
    step_kls = np.asarray(step_kls, dtype=float)
    if terminal_kl < 0 or np.any(step_kls < 0):
        raise ValueError("KL terms must be non-negative")
    return float(terminal_kl + step_kls.sum())


@dataclass(frozen=True)
class QuadratureKL:
    value: float
    error: float
    n_points: int


def kl_quadrature_1d(log_p: Callable, log_q: Callable, lo: float, hi: float, *,
                     tol: float = 1e-6, n0: int = 1025, max_points: int = 2 ** 22 + 1) -> QuadratureKL:
    """``int p log(p/q)`` on ``[lo, hi]`` by trapezoid rule with grid doubling.

    ``log_p`` and ``log_q`` are vectorised log-densities. The grid is doubled
    until the Richardson estimate ``|I_2n - I_n| / 3`` falls below ``tol``.
    """
    if not hi > lo:
        raise ValueError("need hi > lo")

    def integrand(x):
        lp = np.asarray(log_p(x), dtype=float)
        lq = np.asarray(log_q(x), dtype=float)
        if np.any(np.isnan(lp)) or np.any(np.isnan(lq)):
            raise ValueError("density evaluation returned NaN (negative density?)")
        p = np.exp(lp)
        with np.errstate(invalid="ignore"):
            out = p * (lp - lq)
        return np.where(p > 0, out, 0.0)

    n = n0
    x = np.linspace(lo, hi, n)
    y = integrand(x)
    prev = np.trapezoid(y, x)
    while True:
        n2 = 2 * n - 1
        if n2 > max_points:
            raise RuntimeError(f"quadrature did not reach tol={tol} with {n} points")
        mid = 0.5 * (x[1:] + x[:-1])
        x2 = np.empty(n2)
        x2[0::2], x2[1::2] = x, mid
        y2 = np.empty(n2)
        y2[0::2], y2[1::2] = y, integrand(mid)
        cur = np.trapezoid(y2, x2)
        err = abs(cur - prev) / 3.0
        x, y, n = x2, y2, n2
        if err < tol:
            # Richardson extrapolation of the two trapezoid levels.
            return QuadratureKL(float(cur + (cur - prev) / 3.0), float(err), n)
        prev = cur


def init_bound(d: int, m2: float, T: float) -> float:
    """``(d + m2) e^{-T}``, the bound on ``KL(p_T || N(0, I))``."""
    return (d + m2) * math.exp(-T)


def gronwall_bound(h_prime: float, eps: float, smooth: bool = True) -> float:
    """Per-step map deviation bound ``C h'^2 eps^2``; ``C = e^2`` or ``e^4``."""
    c = math.e ** 2 if smooth else math.e ** 4
    return c * h_prime ** 2 * eps ** 2


def solver_step_bound(h: float, L: float, d: int) -> float:
    """``e^h L^3 h^2 d`` for one exponential-integrator step."""
    return math.exp(h) * L ** 3 * h ** 2 * d


def map_gap_bound(L_f: float, h: float, L: float, d: int, eps_cd: float, t_n: float, t_1: float) -> float:
    """Distilled-vs-empirical map bound ``L_f e^{h/2} L^{3/2} d^{1/2} h + eps_cd (t_n - t_1)``."""
    return L_f * math.exp(h / 2) * L ** 1.5 * math.sqrt(d) * h + eps_cd * (t_n - t_1)


def map_gap_bound_true(n: int, h: float, L: float, d: int, eps_cd: float, eps_score: float,
                       t_n: float, t_1: float) -> float:
    """Distilled-vs-true map bound ``n e^{h/2} L^{3/2} d^{1/2} h + (t_n - t_1)(3 eps_cd + 2 eps_score)``."""
    return n * math.exp(h / 2) * L ** 1.5 * math.sqrt(d) * h + (t_n - t_1) * (3 * eps_cd + 2 * eps_score)


@dataclass(frozen=True)
class BoundFormula:
    regime: Regime
    inputs: dict = field(compare=False)
    init_term: float
    score_term: float

    @property
    def value(self) -> float:
        return self.init_term + self.score_term


def theorem_rhs(regime, d: int, m2: float, schedule: Schedule, eps_score: float, *,
                L: float | None = None, delta: float | None = None) -> BoundFormula:
    """KL bound for the multi-step sampler evaluated from schedule data.

    ``(d + m2) e^{-T} + C max_k(h'_k)^2 eps^2 sum_k 1/(4 (t_{k-1} - t'_{k-1}))``
    with ``C = e^2`` (smooth) or ``e^4`` (non-smooth) and ``T = t_K``.
    """
    regime = Regime(regime)
    if regime is Regime.CUSTOM:
        raise ValueError("theorem_rhs needs a smooth or nonsmooth regime")
    if schedule.regime is not regime:
        raise ValueError(f"schedule regime {schedule.regime.value} does not match {regime.value}")
    if eps_score < 0:
        raise ValueError("eps_score must be >= 0")
    c = math.e ** 2 if regime is Regime.SMOOTH else math.e ** 4
    hp_max = float(np.max(schedule.h_prime))
    gap_sum = float(np.sum(1.0 / (4.0 * schedule.gaps)))
    inputs = {"d": d, "m2": m2, "T": schedule.T, "eps_score": eps_score, "K": schedule.K,
              "L": L if L is not None else schedule.L,
              "delta": delta if delta is not None else schedule.delta,
              "h_prime_max": hp_max, "gap_sum": gap_sum}
    return BoundFormula(regime, inputs, init_bound(d, m2, schedule.T), c * hp_max ** 2 * eps_score ** 2 * gap_sum)


def moment_zscores(samples: np.ndarray, mean, cov) -> tuple[np.ndarray, np.ndarray]:
    """Standardised discrepancies of sample mean and covariance entries.

    Standard errors use the sample fourth moments, so the check does not
    assume Gaussian samples.
    """
    x = np.asarray(samples, dtype=float)
    n, d = x.shape
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (d,))
    cov = np.broadcast_to(np.asarray(cov, dtype=float), (d, d))
    xm = x.mean(axis=0)
    z_mean = (xm - mean) / (x.std(axis=0, ddof=1) / np.sqrt(n))
    c = x - xm
    prods = c[:, :, None] * c[:, None, :]
    emp = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / np.sqrt(n)
    z_cov = (emp - cov) / se
    return z_mean, z_cov
