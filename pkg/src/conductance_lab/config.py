"""Experiment configuration: parsing, validation, defaults and hashing.

A config is a flat YAML mapping. Unknown keys are rejected and every default
is echoed back by :meth:`ExperimentSpec.to_dict`, so the serialized form is
complete and hashes identically after a round trip.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import yaml

from .lattice import LAWS, BiasSpec, ConductanceField, LatticeError
from .walk import LocalFunction

LAMBDA_MAX = 0.5

ESTIMATORS = (
    "speed", "speed_regen", "sigma", "steady_timeavg", "steady_regen", "steady_torus",
    "lambda_f_clt", "lambda_f_girsanov", "einstein", "expansion", "probes", "maxima", "regen",
)
SUITES = {
    "einstein": ("einstein",),
    "expansion": ("expansion",),
    "probes": ("probes", "maxima"),
    "regen-diagnostics": ("regen",),
}
SUITES["all"] = tuple(e for s in ("einstein", "expansion", "probes", "regen-diagnostics") for e in SUITES[s])

F_KINDS = ("bond", "window_sum", "q0_density", "constant")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentSpec:
    """Validated experiment description.

    Horizons are in walk steps. For a tilt ``lambda > 0`` the horizon is
    ``horizon`` if given, else ``ceil(horizon_scale / lambda^2)``; λ = 0 runs
    use ``sigma_horizon``.
    """

    dimension: int
    kappa: float
    seed: int
    lambdas: tuple = (0.1,)
    estimators: tuple = ("speed",)
    experiment_id: str = "experiment"
    law: str = "two_point"
    law_param: float | None = None
    ell: tuple | None = None
    L0: int = 2
    replicas: int = 1000
    horizon: int | None = None
    horizon_scale: float = 10.0
    sigma_horizon: int = 1000
    f: tuple = (("kind", "bond"), ("axis", 0))
    torus_period: int = 3
    torus_samples: int = 4
    cross_section: int = 8
    back_levels: int = 3
    levels: int = 200
    beta: float | None = None
    lookahead: int | None = None
    regen_replicas: int = 10
    probe_walks: int = 2000
    girsanov_t: float = 1.0
    maxima_n: tuple = (1, 2, 4, 8)
    nested_inner: int = 64
    nested_checkpoints: tuple = (8, 16, 32, 64, 128)

    # ------------------------------------------------------------ derived

    def field(self) -> ConductanceField:
        return ConductanceField(self.dimension, self.kappa, self.law, self.law_param, self.seed)

    def bias(self, lam: float) -> BiasSpec:
        ell = self.ell if self.ell is not None else tuple(1.0 if i == 0 else 0.0 for i in range(self.dimension))
        return BiasSpec(lam, ell, self.L0)

    def horizon_for(self, lam: float) -> int:
        if lam == 0:
            return int(self.sigma_horizon)
        if self.horizon is not None:
            return int(self.horizon)
        return int(math.ceil(self.horizon_scale / lam**2))

    def local_function(self) -> LocalFunction:
        return build_local_function(dict(self.f), self.field())

    @property
    def config_hash(self) -> str:
        return spec_hash(self)

    def to_dict(self) -> dict:
        out = {}
        for fld in dataclasses.fields(self):
            v = getattr(self, fld.name)
            if fld.name == "lambdas":
                out["lambda"] = list(v)
            elif fld.name == "f":
                out["f"] = dict(v)
            elif isinstance(v, tuple):
                out[fld.name] = list(v)
            else:
                out[fld.name] = v
        return out

    def replace(self, **changes) -> "ExperimentSpec":
        return validate(dataclasses.replace(self, **changes))


_KEYS = {fld.name for fld in dataclasses.fields(ExperimentSpec)} - {"lambdas"} | {"lambda"}
_REQUIRED = ("dimension", "kappa", "seed")


def build_local_function(params: dict, field: ConductanceField) -> LocalFunction:
    p = dict(params)
    kind = p.pop("kind", "bond")
    centered = bool(p.pop("centered", False))
    d = field.dimension
    if kind == "bond":
        f = LocalFunction.bond(d, int(p.pop("axis", 0)), p.pop("offset", None))
    elif kind == "window_sum":
        f = LocalFunction.window_sum(d, int(p.pop("radius", 1)))
    elif kind == "q0_density":
        f = LocalFunction.q0_density(field)
    elif kind == "constant":
        f = LocalFunction.constant(d, float(p.pop("value", 1.0)))
    else:
        raise ConfigError(f"unknown local function kind {kind!r}; expected one of {F_KINDS}")
    if p:
        raise ConfigError(f"unknown local function parameters {sorted(p)}")
    return f.centered(field) if centered else f


def validate(spec: ExperimentSpec) -> ExperimentSpec:
    if spec.dimension < 2:
        raise ConfigError("dimension must be at least 2")
    if spec.law not in LAWS:
        raise ConfigError(f"unknown law {spec.law!r}")
    try:
        field = spec.field()
    except LatticeError as exc:
        raise ConfigError(str(exc)) from exc
    if not spec.lambdas:
        raise ConfigError("lambda list is empty")
    for lam in spec.lambdas:
        if not (0.0 <= lam <= LAMBDA_MAX):
            raise ConfigError(f"lambda = {lam} outside [0, {LAMBDA_MAX}]")
    if not spec.estimators:
        raise ConfigError("estimator list is empty")
    bad = [e for e in spec.estimators if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimators {bad}; expected a subset of {ESTIMATORS}")
    if spec.horizon is not None:
        for lam in spec.lambdas:
            if lam > 0 and spec.horizon < 1.0 / lam**2:
                raise ConfigError(f"horizon {spec.horizon} < 1/lambda^2 = {1.0 / lam**2:.6g} at lambda = {lam}")
    if spec.horizon_scale < 1.0:
        raise ConfigError("horizon_scale must be at least 1")
    for name in ("replicas", "L0", "sigma_horizon", "torus_period", "torus_samples", "cross_section",
                 "levels", "regen_replicas", "probe_walks"):
        if getattr(spec, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if spec.nested_inner < 2:
        raise ConfigError("nested_inner must be at least 2")
    if spec.beta is not None and not (0.0 < spec.beta < 1.0):
        raise ConfigError("beta must lie in (0, 1)")
    try:
        for lam in spec.lambdas:
            spec.bias(lam)
    except LatticeError as exc:
        raise ConfigError(str(exc)) from exc
    build_local_function(dict(spec.f), field)
    return spec


def from_dict(data: dict) -> ExperimentSpec:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(data) - _KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    missing = [k for k in _REQUIRED if k not in data]
    if missing:
        raise ConfigError(f"missing required keys {missing}")
    kw = {}
    for k, v in data.items():
        if k == "lambda":
            v = [v] if isinstance(v, (int, float)) else v
            kw["lambdas"] = tuple(float(x) for x in v)
        elif k == "f":
            if not isinstance(v, dict):
                raise ConfigError("f must be a mapping")
            kw["f"] = tuple(sorted(v.items()))
        elif k in ("estimators", "maxima_n", "nested_checkpoints", "ell") and v is not None:
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        spec = ExperimentSpec(**kw)
        spec = dataclasses.replace(
            spec,
            dimension=int(spec.dimension), kappa=float(spec.kappa), seed=int(spec.seed),
            L0=int(spec.L0), replicas=int(spec.replicas),
            ell=None if spec.ell is None else tuple(float(x) for x in spec.ell),
            f=tuple(sorted(dict(spec.f).items())),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if spec.seed < 0 or spec.seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return validate(spec)


def parse_config(text: str) -> ExperimentSpec:
    """Parse and validate YAML config text."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return from_dict(data if data is not None else {})


def serialize(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=True)


def spec_hash(spec: ExperimentSpec) -> str:
    blob = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
