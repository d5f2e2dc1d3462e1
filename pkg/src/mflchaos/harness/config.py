"""Experiment configuration: JSON files mapped onto strict dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

import numpy as np

from ..cloud import DistributionSpec
from ..functionals import (CompositeExpectation, LogCoshPotential, PairwiseInteraction,
                           QuadraticPotential, TwoLayerNetLoss, ZeroFunctional)


class ConfigError(ValueError):
    """Schema violation in an experiment configuration."""


FAMILIES = ("zero", "composite_tanh", "pairwise_gaussian", "two_layer_net")
FAULTS = ("none", "flip_intrinsic_sign", "flip_flat_sign")


@dataclass
class FunctionalConfig:
    family: str = "composite_tanh"
    kappa: float = 2.0
    target: float = 0.5
    amplitude: float = 1.0
    length_scale: float = 1.0
    n_data: int = 6
    input_dim: int = 1
    truncation: float = 5.0
    data_seed: int = 0
    fault: str = "none"

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"functional.family must be one of {FAMILIES}, got {self.family!r}")
        if self.fault not in FAULTS:
            raise ConfigError(f"functional.fault must be one of {FAULTS}")


@dataclass
class PotentialConfig:
    family: str = "quadratic"
    c: float = 1.0
    a: float = 1.0

    def validate(self):
        if self.family not in ("quadratic", "logcosh"):
            raise ConfigError("potential.family must be 'quadratic' or 'logcosh'")
        if not self.c > 0:
            raise ConfigError("potential.c must be > 0")


@dataclass
class InitialConfig:
    kind: str = "gaussian"
    mean: float = 1.0
    cov_scalar: float = 1.0
    a: float = 0.0
    b: float = 1.0

    def validate(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ConfigError("initial.kind must be 'gaussian' or 'uniform'")


@dataclass
class GridConfig:
    L: float = 8.0
    M: int = 2048
    damping: float = 0.5
    tol: float = 1e-13
    max_iter: int = 20000

    def validate(self):
        if not self.L > 0 or self.M < 16:
            raise ConfigError("grid needs L > 0 and M >= 16")
        if not 0 < self.damping <= 1:
            raise ConfigError("grid.damping must lie in (0, 1]")


@dataclass
class WindowConfig:
    sup_from: float = 1.0
    early: tuple = (0.0, 10.0)
    split: float = 25.0
    plateau: tuple = (25.0, 50.0)


@dataclass
class RateConfig:
    n_list: tuple = (32, 64, 128, 256, 512, 1024, 2048, 4096)
    replicas: int = 32
    concentration_n_list: tuple = (64, 128, 256, 512, 1024, 2048, 4096)
    concentration_replicas: int = 256
    loo_clouds: int = 20


@dataclass
class ExperimentConfig:
    functional: FunctionalConfig = field(default_factory=FunctionalConfig)
    potential: PotentialConfig = field(default_factory=PotentialConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    windows: WindowConfig = field(default_factory=WindowConfig)
    rate: RateConfig = field(default_factory=RateConfig)
    sigma: float = 1.0
    dim: int = 1
    dt: float = 1e-3
    dt_max: float = 1e-2
    t_end: float = 50.0
    save_every: float = 0.5
    n_list: tuple = (8, 16, 32, 64, 128, 256, 512)
    replicas: int = 8
    seed: int = 0
    oracle: str = "grid"
    n_ref_factor: int = 64
    init_coupling: str = "identical"
    halving_check: bool = True
    n_joints: int = 1000
    validate_families: tuple = ("composite_tanh", "pairwise_gaussian", "two_layer_net")
    output_dir: str = "out"

    def validate(self):
        for sub in (self.functional, self.potential, self.initial, self.grid):
            sub.validate()
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0")
        if not 0 < self.dt <= self.dt_max:
            raise ConfigError("need 0 < dt <= dt_max")
        if self.save_every < self.dt or self.t_end <= 0:
            raise ConfigError("need save_every >= dt and t_end > 0")
        if list(self.n_list) != sorted(self.n_list) or min(self.n_list) < 2:
            raise ConfigError("n_list must be ascending with n >= 2")
        if self.replicas < 2:
            raise ConfigError("replicas must be >= 2")
        if self.oracle not in ("grid", "cloud"):
            raise ConfigError("oracle must be 'grid' or 'cloud'")
        if self.oracle == "grid" and self.dim != 1:
            raise ConfigError("the grid oracle needs dim = 1")
        if self.init_coupling not in ("identical", "independent"):
            raise ConfigError("init_coupling must be 'identical' or 'independent'")
        for fam in self.validate_families:
            if fam not in FAMILIES:
                raise ConfigError(f"unknown family {fam!r} in validate_families")
        return self

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    @property
    def save_times(self) -> tuple:
        k = int(round(self.t_end / self.save_every))
        return tuple(float(v) for v in np.round(np.arange(k + 1) * self.save_every, 12))

    def initial_spec(self) -> DistributionSpec:
        i = self.initial
        return DistributionSpec(i.kind, dim=self.dim, mean=i.mean, cov_scalar=i.cov_scalar, a=i.a, b=i.b)

    def build_potential(self):
        p = self.potential
        return QuadraticPotential(p.c) if p.family == "quadratic" else LogCoshPotential(p.c, p.a)

    def build_functional(self, family=None):
        return build_functional(self.functional, self.dim, family)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


class _Flipped:
    """Wrap a functional and negate one of its derivatives (fault injection)."""

    def __init__(self, inner, which):
        self._inner = inner
        self._which = which
        self.name = f"{getattr(inner, 'name', 'functional')}[{which}]"

    def __getattr__(self, item):
        return getattr(self._inner, item)

    def intrinsic_derivative(self, measure, x):
        out = self._inner.intrinsic_derivative(measure, x)
        return -out if self._which == "flip_intrinsic_sign" else out

    def finite_particle_gradient(self, cloud, i):
        return self.intrinsic_derivative(cloud, cloud.positions[i])[0]

    def linear_derivative(self, measure, x):
        out = self._inner.linear_derivative(measure, x)
        return -out if self._which == "flip_flat_sign" else out


def build_functional(fc: FunctionalConfig, dim=1, family=None):
    fam = fc.family if family is None else family
    if fam == "zero":
        f = ZeroFunctional(dim)
    elif fam == "composite_tanh":
        f = CompositeExpectation.quadratic_tanh(fc.kappa, fc.target, dim)
    elif fam == "pairwise_gaussian":
        f = PairwiseInteraction(fc.amplitude, fc.length_scale, dim)
    elif fam == "two_layer_net":
        rng = np.random.default_rng(fc.data_seed)
        z = rng.uniform(-1, 1, size=(fc.n_data, fc.input_dim))
        f = TwoLayerNetLoss(z, np.sin(np.pi * z[:, 0]), fc.truncation)
    else:
        raise ConfigError(f"unknown family {fam!r}")
    if fc.fault != "none" and family is None:
        return _Flipped(f, fc.fault)
    return f


# ---------------------------------------------------------------------------
# Strict loading
# ---------------------------------------------------------------------------


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    raise ConfigError(f"{path}: unsupported field type {tp!r}")


def _from_dict(cls, data: dict, path="config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data).validate()


def load_config(path=None) -> ExperimentConfig:
    """Read a JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig().validate()
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)
