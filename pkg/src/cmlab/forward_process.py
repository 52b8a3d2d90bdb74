"""Ornstein-Uhlenbeck forward process: transitions, renoising and time grids.

The forward SDE is ``dx = -x dt + sqrt(2) dW``. Between two times
``t_from <= t_to`` the transition is Gaussian,

    x_{t_to} = exp(t_from - t_to) x_{t_from} + sqrt(1 - exp(2 (t_from - t_to))) z,

which is all the sampler needs to renoise a point after a consistency jump.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

# Guard against runaway loops when delta -> 0 in the non-smooth regime.
MAX_STEPS = 200_000


class ScheduleError(ValueError):
    """A schedule violates its construction constraints."""


class Regime(str, enum.Enum):
    SMOOTH = "smooth"
    NONSMOOTH = "nonsmooth"
    CUSTOM = "custom"


def sigma2(t):
    """Conditional variance ``1 - exp(-2t)`` of x_t given x_0."""
    return -np.expm1(-2.0 * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class OuTransition:
    t_from: float
    t_to: float
    shrink: float
    noise_std: float


def ou_transition(t_from: float, t_to: float) -> OuTransition:
    """Coefficients of the OU transition kernel from ``t_from`` to ``t_to``.

    ``t_to`` may be ``inf`` (the stationary limit).
    """
    if t_from < 0:
        raise ValueError(f"t_from must be >= 0, got {t_from}")
    if t_from > t_to:
        raise ValueError(f"t_from ({t_from}) must not exceed t_to ({t_to})")
    elapsed = t_from - t_to
    shrink = math.exp(elapsed)
    noise_std = math.sqrt(-math.expm1(2.0 * elapsed))
    return OuTransition(float(t_from), float(t_to), shrink, noise_std)


def renoise(x, t_from: float, t_to: float, rng: np.random.Generator) -> np.ndarray:
    """Push ``x`` (shape ``(d,)`` or ``(n, d)``) forward from ``t_from`` to ``t_to``.

    One standard normal draw per coordinate is always consumed, so the random
    stream stays aligned even when the transition is the identity.
    """
    tr = ou_transition(t_from, t_to)
    x = np.asarray(x, dtype=float)
    z = rng.standard_normal(x.shape)
    return tr.shrink * x + tr.noise_std * z


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream ``(seed, *keys)``.

    Philox streams keyed through ``SeedSequence`` are independent for distinct
    key tuples, so a trajectory block is reproducible from its index alone.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class Schedule:
    """Time grid ``t_0 < ... < t_K`` with renoise targets ``t'_{k-1} < t_{k-1}``.

    ``h[k-1] = t_k - t_{k-1}`` and ``h_prime[k-1] = t_k - t'_{k-1}`` for
    ``k = 1..K``. ``stop_time`` is where the sampler emits its output: ``t_0``
    in the smooth regime, ``t'_0 = delta`` in the non-smooth one.
    """

    t: np.ndarray
    t_prime: np.ndarray
    h: np.ndarray
    h_prime: np.ndarray
    regime: Regime
    L: float | None = None
    d: int | None = None
    delta: float | None = None
    T_target: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("t", "t_prime", "h", "h_prime"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return len(self.t) - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def gaps(self) -> np.ndarray:
        """Renoise gaps ``t_{k-1} - t'_{k-1}`` for ``k = 1..K``."""
        return self.t[:-1] - self.t_prime

    @property
    def stop_time(self) -> float:
        if self.regime is Regime.NONSMOOTH:
            return float(self.t_prime[0])
        return float(self.t[0])

    @property
    def stops_at_t_prime(self) -> bool:
        return self.regime is Regime.NONSMOOTH

    def validate(self) -> None:
        t, tp, h, hp = self.t, self.t_prime, self.h, self.h_prime
        if len(t) < 2:
            raise ScheduleError("schedule needs at least one step")
        if not (len(tp) == len(h) == len(hp) == len(t) - 1):
            raise ScheduleError("array lengths inconsistent with K")
        if not t[0] > 0:
            raise ScheduleError("t_0 must be positive")
        if not np.all(t[1:] > t[:-1]):
            raise ScheduleError("times must be strictly increasing")
        if np.any(tp < 0):
            raise ScheduleError("t' must be non-negative")
        if self.regime is Regime.CUSTOM:
            if np.any(tp > t[:-1]):
                raise ScheduleError("t'_{k-1} must not exceed t_{k-1}")
            return
        if not np.all(tp < t[:-1]):
            raise ScheduleError("t'_{k-1} < t_{k-1} violated")
        if not np.all(h < hp):
            raise ScheduleError("h_k < h'_k violated")
        if self.regime is Regime.SMOOTH:
            bound = 1.0 / (2.0 * (1.0 + self.L))
            if np.any(hp > bound * (1 + 1e-12)):
                raise ScheduleError(f"h'_k exceeds 1/(2(1+L)) = {bound}")
        elif self.regime is Regime.NONSMOOTH:
            bound = sigma2(tp) / self.d
            if not np.all(hp < bound):
                raise ScheduleError("h'_k < sigma^2_{t'_{k-1}}/d violated")
            if not tp[0] == self.delta:
                raise ScheduleError("t'_0 must equal delta")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t_k", "t_prime_k", "h_k", "h_prime_k"])
        for k in range(self.K + 1):
            if k < self.K:
                w.writerow([k, repr(float(self.t[k])), repr(float(self.t_prime[k])),
                            "" if k == 0 else repr(float(self.h[k - 1])),
                            "" if k == 0 else repr(float(self.h_prime[k - 1]))])
            else:
                w.writerow([k, repr(float(self.t[k])), "", repr(float(self.h[k - 1])),
                            repr(float(self.h_prime[k - 1]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "t": [float(v) for v in self.t],
            "t_prime": [float(v) for v in self.t_prime],
            "L": self.L,
            "d": self.d,
            "delta": self.delta,
        }

    @classmethod
    def from_times(cls, t, t_prime, regime: Regime = Regime.CUSTOM, **kw) -> "Schedule":
        t = np.asarray(t, dtype=float)
        t_prime = np.asarray(t_prime, dtype=float)
        h = np.diff(t)
        hp = t[1:] - t_prime
        sched = cls(t, t_prime, h, hp, Regime(regime), **kw)
        sched.validate()
        return sched


def _uniform_grid(t0: float, step: float, K: int, T: float) -> np.ndarray:
    t = t0 + step * np.arange(K + 1, dtype=float)
    # Shorten the final step so t_K = T; keep a full step if t_{K-1} already reaches T.
    if t[K - 1] < T:
        t[K] = T
    return t


def _constant_gap_schedule(t, step, gap, regime, first_t_prime=None, **kw) -> Schedule:
    t_prime = t[:-1] - gap
    if first_t_prime is not None:
        # t_0 - gap may differ from the intended t'_0 by one ulp; pin it.
        t_prime[0] = first_t_prime
    # Nominal step sizes: np.diff of the grid can overshoot the step by an ulp.
    h = np.full(len(t) - 1, step)
    h[-1] = min(step, t[-1] - t[-2])
    hp = h + gap
    sched = Schedule(t, t_prime, h, hp, regime, **kw)
    sched.validate()
    return sched


def build_schedule_smooth(L: float, d: int, m2: float, eps: float | None = None, *,
                          T: float | None = None, gap: float | None = None,
                          t_start: float | None = None) -> Schedule:
    """Constant-step grid for the Lipschitz-score regime.

    Steps are ``h = 1/(3(L+1))``, renoise gap ``1/(6(L+1))`` (so
    ``h' = 1/(2(L+1))``), horizon ``T = log((d + m2)/eps)`` and
    ``K = ceil(3(L+1) T)``. Pass ``T`` directly to sweep the horizon. ``gap``
    overrides the renoise gap; ``t_start`` overrides ``t_0`` (default: the gap,
    so that ``t'_0 = 0``).
    """
    if L < 1:
        raise ScheduleError("L must be >= 1")
    if d < 1 or m2 < 0:
        raise ScheduleError("need d >= 1 and m2 >= 0")
    if T is None:
        if eps is None or eps <= 0:
            raise ScheduleError("eps must be positive")
        if eps >= d + m2:
            raise ScheduleError("eps must be smaller than d + m2 (T would be <= 0)")
        T = math.log((d + m2) / eps)
    if T <= 0:
        raise ScheduleError("T must be positive")
    h = 1.0 / (3.0 * (L + 1.0))
    if gap is None:
        gap = 1.0 / (6.0 * (L + 1.0))
    # Relative slack: the default gap sits exactly on the upper limit.
    if not 0 < gap <= (1.0 / (2.0 * (L + 1.0)) - h) * (1 + 1e-12):
        raise ScheduleError(f"gap must lie in (0, {1.0 / (2.0 * (L + 1.0)) - h}]")
    t0 = gap if t_start is None else float(t_start)
    if t0 < gap:
        raise ScheduleError("t_start must be >= gap so that t'_0 >= 0")
    K = math.ceil(3.0 * (L + 1.0) * T)
    if K > MAX_STEPS:
        raise ScheduleError(f"K = {K} exceeds MAX_STEPS")
    t = _uniform_grid(t0, h, K, T)
    return _constant_gap_schedule(t, h, gap, Regime.SMOOTH, L=float(L), d=int(d), T_target=T,
                                  meta={"eps": eps, "m2": m2})


def build_schedule_nonsmooth(d: int, m2: float, eps: float | None = None, delta: float = 0.1, *,
                             T: float | None = None, max_steps: int = MAX_STEPS) -> Schedule:
    """Constant-step grid without score smoothness, stopping at ``t'_0 = delta``.

    ``h = (1 - e^{-delta})/(2d)``, ``h' = (1 - e^{-delta})/d`` and
    ``K = ceil(2d/(1 - e^{-delta}) log((d + m2)/eps))``.
    """
    if not delta > 0:
        raise ScheduleError("delta must be positive")
    if d < 1 or m2 < 0:
        raise ScheduleError("need d >= 1 and m2 >= 0")
    if T is None:
        if eps is None or eps <= 0:
            raise ScheduleError("eps must be positive")
        if eps >= d + m2:
            raise ScheduleError("eps must be smaller than d + m2 (T would be <= 0)")
        T = math.log((d + m2) / eps)
    if T <= 0:
        raise ScheduleError("T must be positive")
    one_minus = -math.expm1(-delta)
    h = one_minus / (2.0 * d)
    gap = one_minus / (2.0 * d)
    K = math.ceil(2.0 * d / one_minus * T)
    if K > max_steps:
        raise ScheduleError(f"K = {K} exceeds the configured maximum {max_steps}; delta too small")
    t = _uniform_grid(delta + gap, h, K, T)
    return _constant_gap_schedule(t, h, gap, Regime.NONSMOOTH, first_t_prime=float(delta), d=int(d),
                                  delta=float(delta), T_target=T, meta={"eps": eps, "m2": m2})
