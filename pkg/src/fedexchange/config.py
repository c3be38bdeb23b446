"""Scenario configuration: typed sections, YAML (de)serialisation, validation and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .cost_model import ActionKind, SizeModel
from .decision_engine import ALL_KINDS, EngineConfig
from .errors import ConfigurationError, NotFoundError, SchemaError
from .learner import TrainConfig
from .network_graph import TOPOLOGY_MODELS, ChurnConfig

log = logging.getLogger(__name__)

ENV_PREFIX = "FEDEXCHANGE__"
REGIMES = ("iid", "pathological", "quantity_skew")


@dataclass(frozen=True)
class DatasetSpec:
    class_count: int = 10
    dim: int = 32
    samples_per_class: int = 200
    class_separation: float = 3.0
    csv: str | None = None
    test_fraction: float = 0.2
    # Held out (before partitioning) to pretrain a foundation backbone.
    pretrain_fraction: float = 0.0

    def __post_init__(self) -> None:
        if min(self.class_count, self.dim, self.samples_per_class) < 1:
            raise ConfigurationError("dataset counts must be >= 1")
        if not self.class_separation > 0:
            raise ConfigurationError("dataset.class_separation must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("dataset.test_fraction must lie in (0, 1)")
        if not 0.0 <= self.pretrain_fraction < 1.0:
            raise ConfigurationError("dataset.pretrain_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class PartitionSpec:
    regime: str = "iid"
    labels_per_client: int = 2
    ratios: tuple[float, ...] | None = None
    # Fraction of the training pool handed out at all (tiny-shard scenarios).
    pool_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigurationError(f"partition.regime must be one of {REGIMES}")
        if self.labels_per_client < 1:
            raise ConfigurationError("partition.labels_per_client must be >= 1")
        if not 0.0 < self.pool_fraction <= 1.0:
            raise ConfigurationError("partition.pool_fraction must lie in (0, 1]")
        if self.ratios is not None:
            object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
            if any(r < 0 for r in self.ratios):
                raise ConfigurationError("partition.ratios must be non-negative")
            if abs(sum(self.ratios) - 1.0) > 1e-9:
                raise ConfigurationError(
                    f"partition.ratios must sum to 1, got {sum(self.ratios):.12g}"
                )


@dataclass(frozen=True)
class CovariateSpec:
    enabled: bool = False
    angle: float | None = 0.5
    scale_range: tuple[float, float] = (0.8, 1.25)
    noise_sigma: float = 0.5
    per_class: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError("covariate.scale_range must satisfy 0 < lo <= hi")
        if not self.noise_sigma >= 0:
            raise ConfigurationError("covariate.noise_sigma must be >= 0")


@dataclass(frozen=True)
class TopologyConfig:
    model: str = "erdos_renyi"
    p: float = 0.3
    k: int = 1
    trust_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.model not in TOPOLOGY_MODELS:
            raise ConfigurationError(f"topology.model must be one of {TOPOLOGY_MODELS}")
        for name in ("p", "trust_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"topology.{name} must lie in [0, 1]")
        if self.k < 1:
            raise ConfigurationError("topology.k must be >= 1")


def _range(name: str, value: tuple[float, float], lo: float, hi: float | None) -> tuple[float, float]:
    a, b = (float(v) for v in value)
    if a > b or a < lo or (hi is not None and b > hi):
        bound = f"[{lo}, {hi}]" if hi is not None else f">= {lo}"
        raise ConfigurationError(f"resources.{name} must be an ordered pair within {bound}")
    return a, b


@dataclass(frozen=True)
class ResourceSpec:
    """Uniform ranges each client's resources are drawn from."""

    power: tuple[float, float] = (0.3, 1.0)
    mem: tuple[float, float] = (0.3, 1.0)
    bandwidth: tuple[float, float] = (2.0e5, 4.0e5)

    def __post_init__(self) -> None:
        object.__setattr__(self, "power", _range("power", self.power, 0.0, 1.0))
        object.__setattr__(self, "mem", _range("mem", self.mem, 0.0, 1.0))
        object.__setattr__(self, "bandwidth", _range("bandwidth", self.bandwidth, 0.0, None))


@dataclass(frozen=True)
class ModelSpec:
    hidden_dim: int = 0
    init: str = "zeros"
    init_scale: float = 0.1
    foundation: bool = False
    pretrain_epochs: int = 20
    freeze_backbone: bool = True
    frozen_fraction: float = 0.0
    variance_floor: float = 1e-3

    def __post_init__(self) -> None:
        if self.hidden_dim < 0:
            raise ConfigurationError("model.hidden_dim must be >= 0")
        if self.init not in ("zeros", "seeded_uniform"):
            raise ConfigurationError("model.init must be 'zeros' or 'seeded_uniform'")
        if self.foundation and self.hidden_dim == 0:
            raise ConfigurationError("model.foundation needs model.hidden_dim > 0")
        if self.pretrain_epochs < 0:
            raise ConfigurationError("model.pretrain_epochs must be >= 0")
        if not 0.0 <= self.frozen_fraction <= 1.0:
            raise ConfigurationError("model.frozen_fraction must lie in [0, 1]")
        if not self.variance_floor > 0:
            raise ConfigurationError("model.variance_floor must be positive")


@dataclass(frozen=True)
class ConvergenceSpec:
    window: int = 3
    epsilon: float = 0.01
    early_stop: bool = True

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ConfigurationError("convergence.window must be >= 1")
        if not self.epsilon > 0:
            raise ConfigurationError("convergence.epsilon must be positive")


SECTIONS: dict[str, type] = {
    "dataset": DatasetSpec,
    "partition": PartitionSpec,
    "covariate": CovariateSpec,
    "topology": TopologyConfig,
    "churn": ChurnConfig,
    "resources": ResourceSpec,
    "size_model": SizeModel,
    "model": ModelSpec,
    "train": TrainConfig,
    "engine": EngineConfig,
    "convergence": ConvergenceSpec,
}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "custom"
    clients: int = 10
    rounds: int = 30
    seed: int = 0
    retain_received: bool = True
    synthetic_weight: float = 1.0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    covariate: CovariateSpec = field(default_factory=CovariateSpec)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    churn: ChurnConfig = field(default_factory=ChurnConfig)
    resources: ResourceSpec = field(default_factory=ResourceSpec)
    size_model: SizeModel = field(default_factory=SizeModel)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    convergence: ConvergenceSpec = field(default_factory=ConvergenceSpec)

    def __post_init__(self) -> None:
        if self.clients < 1:
            raise ConfigurationError("clients must be >= 1")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if not self.synthetic_weight > 0:
            raise ConfigurationError("synthetic_weight must be positive")
        part = self.partition
        if part.regime == "quantity_skew":
            if part.ratios is None:
                raise ConfigurationError("partition.ratios is required for quantity_skew")
            if len(part.ratios) != self.clients:
                raise ConfigurationError(
                    f"partition.ratios has {len(part.ratios)} entries for {self.clients} clients"
                )
        if part.regime == "pathological" and part.labels_per_client > self.dataset.class_count:
            raise ConfigurationError("partition.labels_per_client exceeds dataset.class_count")
        if self.model.foundation and self.dataset.pretrain_fraction == 0.0:
            raise ConfigurationError("model.foundation needs dataset.pretrain_fraction > 0")

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def replace(self, **changes: Any) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (frozenset, set)):
        return sorted(_plain(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, ActionKind):
        return value.value
    return value


def _schema() -> dict[str, Any]:
    text = resources.files("fedexchange").joinpath("scenario_schema.json").read_text()
    return json.loads(text)


def _path(parts: Any) -> str:
    return ".".join(str(p) for p in parts)


def _section(cls: type, values: Mapping[str, Any], path: str) -> Any:
    kwargs = dict(values)
    for f in dataclasses.fields(cls):
        if f.name not in kwargs:
            continue
        value = kwargs[f.name]
        if isinstance(value, list):
            kwargs[f.name] = tuple(value)
        elif f.type in ("float", "float | None") and type(value) is int:
            kwargs[f.name] = float(value)
    if cls is EngineConfig and "allowed" in kwargs:
        kwargs["allowed"] = frozenset(ActionKind(k) for k in kwargs["allowed"])
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        msg = str(exc)
        raise ConfigurationError(msg if msg.startswith(path) else f"{path}: {msg}") from None


def from_dict(data: Mapping[str, Any] | None, strict: bool = False) -> ScenarioConfig:
    """Validate a plain mapping and build a :class:`ScenarioConfig`.

    Unknown keys raise ``SchemaError`` when ``strict``; otherwise they are
    logged and dropped. Wrong types always raise ``SchemaError``; violated
    value invariants raise ``ConfigurationError``.
    """
    data = _strip_unknown(dict(data or {}), _schema(), strict, "")
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise SchemaError(_path(err.absolute_path), err.message)

    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in SECTIONS:
            kwargs[key] = _section(SECTIONS[key], value, key)
        elif key == "synthetic_weight":
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return ScenarioConfig(**kwargs)


def _strip_unknown(data: Any, schema: Mapping[str, Any], strict: bool, path: str) -> Any:
    if not isinstance(data, dict) or "properties" not in schema:
        return data
    out = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in schema["properties"]:
            if strict:
                raise SchemaError(sub, "unknown key")
            log.warning("ignoring unknown config key %s", sub)
            continue
        out[key] = _strip_unknown(value, schema["properties"][key], strict, sub)
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Nested overrides from ``FEDEXCHANGE__SECTION__KEY=value`` variables.

    Values are parsed as YAML scalars, so ``3`` is an int and ``[1, 2]`` a list.
    """
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX) :].split("__") if k]
        if not keys:
            continue
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = yaml.safe_load(environ[name])
    return out


def _merge(base: dict[str, Any], extra: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = _merge(dict(out[key]), value)
        else:
            out[key] = value
    return out


def parse_config(
    path: str | Path,
    strict: bool = False,
    environ: Mapping[str, str] | None = None,
) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise SchemaError("", f"not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise SchemaError("", "top level must be a mapping")
    return from_dict(_merge(data, env_overrides(environ)), strict=strict)


def serialize_config(config: ScenarioConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=None)


def config_hash(config: ScenarioConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


STRATEGY_KINDS: dict[str, frozenset[ActionKind]] = {
    "s1": frozenset({ActionKind.SHARE_RAW_DATA}),
    "s2": frozenset({ActionKind.SHARE_SYNTHETIC_DATA}),
    "s3": frozenset({ActionKind.SHARE_MODEL}),
    "s4": frozenset({ActionKind.SHARE_PARTIAL_MODEL}),
    "adaptive": ALL_KINDS,
}
