"""Evaluable score fields: exact, perturbed by a controlled error, or learned.

The perturbed kind is how score error enters every experiment. Instead of
learning a score and measuring its error after the fact, a known vector field
of magnitude ``eps`` is added to the analytic score, which makes ``eps`` an
independent variable for sweeps.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import targets as tg


class FieldKind(str, enum.Enum):
    EXACT = "exact"
    PERTURBED = "perturbed"
    LEARNED = "learned"


class PerturbationMode(str, enum.Enum):
    CONSTANT_DIRECTION = "constant_direction"
    SMOOTH_FIELD = "smooth_field"


@dataclass(frozen=True)
class Perturbation:
    """Additive score error ``eps * g(x)`` with ``sup ||g|| <= 1``.

    ``CONSTANT_DIRECTION`` uses ``g = u`` for a unit vector ``u``, so the mean
    squared error is exactly ``eps**2``. ``SMOOTH_FIELD`` uses
    ``g_j(x) = sin(w_j . x + phi_j) / sqrt(d)`` with ``||w_j|| = freq``; then
    ``||g|| <= 1`` and g is ``freq``-Lipschitz.
    """

    mode: PerturbationMode
    magnitude: float
    direction: np.ndarray | None = None
    freq: float = 1.0
    seed: int = 0
    d: int | None = None
    _omega: np.ndarray | None = field(default=None, repr=False, compare=False)
    _phase: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mode", PerturbationMode(self.mode))
        if not self.magnitude >= 0:
            raise ValueError("perturbation magnitude must be >= 0")
        if self.mode is PerturbationMode.CONSTANT_DIRECTION:
            if self.direction is None:
                raise ValueError("constant_direction needs a direction vector")
            u = np.asarray(self.direction, dtype=float)
            norm = np.linalg.norm(u)
            if norm == 0:
                raise ValueError("direction must be non-zero")
            u = u / norm
            u.flags.writeable = False
            object.__setattr__(self, "direction", u)
            object.__setattr__(self, "d", len(u))
        else:
            if self.d is None:
                raise ValueError("smooth_field needs the dimension d")
            if not self.freq > 0:
                raise ValueError("freq must be positive")
            rng = np.random.default_rng(self.seed)
            w = rng.standard_normal((self.d, self.d))
            w *= self.freq / np.linalg.norm(w, axis=1, keepdims=True)
            object.__setattr__(self, "_omega", w)
            object.__setattr__(self, "_phase", rng.uniform(0.0, 2.0 * np.pi, self.d))

    @classmethod
    def constant(cls, direction, eps: float) -> "Perturbation":
        return cls(PerturbationMode.CONSTANT_DIRECTION, float(eps), direction=direction)

    @classmethod
    def smooth(cls, d: int, eps: float, freq: float = 1.0, seed: int = 0) -> "Perturbation":
        return cls(PerturbationMode.SMOOTH_FIELD, float(eps), freq=float(freq), seed=int(seed), d=int(d))

    @property
    def field_lipschitz(self) -> float:
        """Lipschitz constant of ``g`` (not scaled by eps)."""
        return 0.0 if self.mode is PerturbationMode.CONSTANT_DIRECTION else self.freq

    @property
    def lipschitz(self) -> float:
        return self.magnitude * self.field_lipschitz

    def __call__(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.mode is PerturbationMode.CONSTANT_DIRECTION:
            return np.broadcast_to(self.magnitude * self.direction, x.shape).copy()
        return self.magnitude * np.sin(x @ self._omega.T + self._phase) / np.sqrt(self.d)

    def to_dict(self) -> dict:
        out = {"mode": self.mode.value, "eps": self.magnitude}
        if self.mode is PerturbationMode.CONSTANT_DIRECTION:
            out["direction"] = [float(v) for v in self.direction]
        else:
            out.update(freq=self.freq, seed=self.seed, d=self.d)
        return out


@dataclass(frozen=True)
class ScoreField:
    """A score estimate ``s_hat_t(x)``; ``lipschitz`` is the declared L, if any."""

    kind: FieldKind
    target: tg.TargetDistribution | None = None
    perturbation: Perturbation | None = None
    model: Callable | None = None
    lipschitz: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FieldKind(self.kind))
        if self.kind is FieldKind.LEARNED:
            if self.model is None:
                raise ValueError("learned field needs a model callable")
        elif self.target is None:
            raise ValueError(f"{self.kind.value} field needs a target")
        if self.kind is FieldKind.PERTURBED and self.perturbation is None:
            raise ValueError("perturbed field needs a perturbation")
        if self.perturbation is not None and self.target is not None and self.perturbation.d != self.target.d:
            raise ValueError("perturbation dimension does not match the target")

    @classmethod
    def exact(cls, target, lipschitz: float | None = None) -> "ScoreField":
        return cls(FieldKind.EXACT, target, lipschitz=lipschitz)

    @classmethod
    def perturbed(cls, target, perturbation: Perturbation, lipschitz: float | None = None) -> "ScoreField":
        return cls(FieldKind.PERTURBED, target, perturbation, lipschitz=lipschitz)

    @classmethod
    def learned(cls, model: Callable, target=None, lipschitz: float | None = None) -> "ScoreField":
        return cls(FieldKind.LEARNED, target, model=model, lipschitz=lipschitz)

    @property
    def eps(self) -> float:
        return self.perturbation.magnitude if self.perturbation is not None else 0.0

    def evaluate(self, t, x) -> np.ndarray:
        if self.kind is FieldKind.LEARNED:
            return np.asarray(self.model(t, x), dtype=float)
        s = tg.score(self.target, t, x)
        if self.kind is FieldKind.PERTURBED:
            s = s + self.perturbation(t, x)
        return s

    __call__ = evaluate

    def describe(self) -> dict:
        out = {"kind": self.kind.value, "lipschitz": self.lipschitz}
        if self.perturbation is not None:
            out["perturbation"] = self.perturbation.to_dict()
        return out


def evaluate(field: ScoreField, t, x) -> np.ndarray:
    return field.evaluate(t, x)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n: int


def measure_score_error(field: ScoreField, target: tg.TargetDistribution, t: float, n: int,
                        rng: np.random.Generator) -> McEstimate:
    """Monte Carlo estimate of ``E_{p_t} ||s_hat_t - s_t||^2``."""
    if n < 100:
        raise ValueError("need n >= 100 samples")
    x = tg.sample_at(target, t, n, rng)
    err = np.sum((field.evaluate(t, x) - tg.score(target, t, x)) ** 2, axis=1)
    return McEstimate(float(err.mean()), float(err.std(ddof=1) / np.sqrt(n)), n)


def effective_lipschitz(field: ScoreField, t_values, n: int, rng: np.random.Generator, *,
                        target: tg.TargetDistribution | None = None, local_scale: float = 1e-2) -> float:
    """Largest observed ``||s(x) - s(y)|| / ||x - y||``; a lower bound on L.

    Half the probe pairs are independent draws from p_t, half are local
    offsets of relative size ``local_scale`` to catch sharp curvature.
    """
    target = target if target is not None else field.target
    if target is None:
        raise ValueError("need a target to draw probe points from")
    worst = 0.0
    for t in np.atleast_1d(np.asarray(t_values, dtype=float)):
        x = tg.sample_at(target, t, n, rng)
        y_far = tg.sample_at(target, t, n, rng)
        scale = np.sqrt(tg.marginal_at(target, t).total_variance())
        y_near = x + local_scale * scale * rng.standard_normal(x.shape)
        sx = field.evaluate(t, x)
        for y in (y_far, y_near):
            dx = np.linalg.norm(x - y, axis=1)
            ok = dx > 0
            ratio = np.linalg.norm(sx - field.evaluate(t, y), axis=1)[ok] / dx[ok]
            if ratio.size:
                worst = max(worst, float(ratio.max()))
    return worst
