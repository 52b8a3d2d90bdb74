"""Experiment configuration: a YAML file mapped onto nested dataclasses.

Every section is a dataclass; keys not declared as fields are rejected so a
typo fails before any computation starts. See ``docs/config.md`` for the
schema.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import typing
from dataclasses import dataclass, field

import yaml

from ..forward_process import Regime
from ..pf_ode import IntegratorConfig, Method
from ..targets import TargetDistribution, TargetError


class ConfigError(ValueError):
    pass


def _numbers(name: str, values) -> None:
    # YAML 1.1 reads "1.0e9" (no exponent sign) as a string; catch it here.
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise ConfigError(f"{name} must contain only numbers (write exponents as 1.0e+9)")


class Experiment(str, enum.Enum):
    VERIFY = "verify"
    SAMPLE = "sample"
    SWEEP_KL = "sweep_kl"
    DISTILL = "distill"
    CHECK_BOUNDS = "check_bounds"
    PLOT = "plot"


@dataclass
class RegimeSection:
    kind: str = "smooth"
    L: float = 1.0
    delta: float = 0.6931471805599453
    eps: float = 0.04
    gap: typing.Optional[float] = None
    T: typing.Optional[float] = None

    def check(self):
        Regime(self.kind)
        if self.kind == "custom":
            raise ConfigError("regime.kind must be smooth or nonsmooth")
        if self.L < 1:
            raise ConfigError("regime.L must be >= 1")
        if not self.delta > 0:
            raise ConfigError("regime.delta must be positive")
        if not self.eps > 0:
            raise ConfigError("regime.eps must be positive")


@dataclass
class ScoreSection:
    mode: str = "exact"
    eps: float = 0.0
    direction: typing.Optional[list] = None
    freq: float = 1.0
    seed: int = 0

    def check(self):
        if self.direction is not None:
            _numbers("score.direction", self.direction)
        if self.mode not in ("exact", "constant_direction", "smooth_field"):
            raise ConfigError("score.mode must be exact, constant_direction or smooth_field")
        if self.eps < 0:
            raise ConfigError("score.eps must be >= 0")


@dataclass
class IntegratorSection:
    method: str = "rk4"
    substep: float = 1e-3
    tolerance: float = 1e-8

    def check(self):
        Method(self.method)
        if not (self.substep > 0 and self.tolerance > 0):
            raise ConfigError("integrator.substep and integrator.tolerance must be positive")

    def build(self, verify: bool = False) -> IntegratorConfig:
        return IntegratorConfig(Method(self.method), self.substep, self.tolerance, verify)


@dataclass
class SamplerSection:
    batch: int = 10000
    init: str = "standard_normal"
    trace: bool = False

    def check(self):
        if self.batch < 1:
            raise ConfigError("sampler.batch must be >= 1")
        if self.init not in ("standard_normal", "exact_terminal"):
            raise ConfigError("sampler.init must be standard_normal or exact_terminal")


@dataclass
class SweepSection:
    T: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0])
    eps_score: list = field(default_factory=lambda: [0.0])
    timeout: float = 600.0

    def check(self):
        _numbers("sweep.T", self.T)
        _numbers("sweep.eps_score", self.eps_score)
        if not self.T or any(t <= 0 for t in self.T):
            raise ConfigError("sweep.T must be a non-empty list of positive times")
        if not self.eps_score or any(e < 0 for e in self.eps_score):
            raise ConfigError("sweep.eps_score must be a non-empty list of values >= 0")
        if not self.timeout > 0:
            raise ConfigError("sweep.timeout must be positive")


@dataclass
class DistillSection:
    family: str = "affine_per_pair"
    N: int = 64
    t_min: float = 0.0
    t_max: float = 4.6
    iterations: int = 2000
    lr: float = 0.1
    batch: int = 64
    ema_rate: float = 0.9
    solver: str = "exponential"
    measure_batch: int = 4000
    # Train on the sampler's (t', t) pairs (from the regime section) instead of a uniform grid.
    align_to_schedule: bool = False
    refine: int = 1

    def check(self):
        if self.family not in ("affine_per_pair", "feature_linear"):
            raise ConfigError("distill.family must be affine_per_pair or feature_linear")
        if self.N < 2 or not self.t_max > self.t_min >= 0:
            raise ConfigError("distill needs N >= 2 and 0 <= t_min < t_max")
        if self.iterations < 0 or self.batch < 1 or not self.lr > 0:
            raise ConfigError("distill needs iterations >= 0, batch >= 1, lr > 0")
        if not 0 <= self.ema_rate <= 1:
            raise ConfigError("distill.ema_rate must lie in [0, 1]")
        if self.refine < 1:
            raise ConfigError("distill.refine must be >= 1")
        if Method(self.solver) is Method.RK4:
            raise ConfigError("distill.solver must be exponential or euler")


@dataclass
class VerifySection:
    tolerance_scale: float = 1.0
    negative_control: str = "none"
    n_mc: int = 20000

    def check(self):
        if not self.tolerance_scale > 0:
            raise ConfigError("verify.tolerance_scale must be positive")
        if self.negative_control not in ("none", "mis_signed_score"):
            raise ConfigError("verify.negative_control must be none or mis_signed_score")
        if self.n_mc < 1000:
            raise ConfigError("verify.n_mc must be >= 1000")


@dataclass
class BoundsSection:
    eps: float = 0.05
    h_prime: float = 0.25
    n_mc: int = 10000
    solver_h: float = 0.05
    t_n: float = 1.0

    def check(self):
        if self.eps < 0 or not self.h_prime > 0 or self.n_mc < 100 or not self.solver_h > 0:
            raise ConfigError("bounds section has out-of-range values")


@dataclass
class PlotSection:
    records: typing.Optional[str] = None
    svg: bool = True


@dataclass
class ExperimentConfig:
    experiment: str = "verify"
    seed: int = 0
    workers: int = 1
    output: str = "results"
    target: list = field(default_factory=lambda: [{"weight": 1.0, "mean": [0.0], "cov_scale": 4.0}])
    regime: RegimeSection = field(default_factory=RegimeSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    distill: DistillSection = field(default_factory=DistillSection)
    verify: VerifySection = field(default_factory=VerifySection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    plot: PlotSection = field(default_factory=PlotSection)

    def check(self):
        try:
            Experiment(self.experiment)
        except ValueError:
            raise ConfigError(f"unknown experiment {self.experiment!r}") from None
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.build_target()
        for f in dataclasses.fields(self):
            sec = getattr(self, f.name)
            if hasattr(sec, "check"):
                sec.check()

    @property
    def kind(self) -> Experiment:
        return Experiment(self.experiment)

    def build_target(self) -> TargetDistribution:
        if not isinstance(self.target, list):
            raise ConfigError("target must be a list of {weight, mean, cov_scale} records")
        try:
            return TargetDistribution.from_config(self.target)
        except (TargetError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid target: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results (not output paths or worker count)."""
        d = self.to_dict()
        d.pop("output")
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


_SCALARS = {float: (int, float), int: (int,), bool: (bool,), str: (str,), list: (list,)}


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a mapping")
        return _build(tp, value, path)
    ok = _SCALARS.get(tp)
    if ok is None:
        return value
    if isinstance(value, bool) and tp is not bool:
        raise ConfigError(f"{path} must be {tp.__name__}, got a boolean")
    if not isinstance(value, ok):
        raise ConfigError(f"{path} must be {tp.__name__}, got {type(value).__name__}")
    return float(value) if tp is float else value


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config keys{where}: {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {})
    cfg.check()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
