"""Named scenarios: five data-distribution rows crossed with five strategy filters.

These are desk-scale settings (10 clients, 30 rounds, 10 classes, 32 features)
picked so that one run takes about a second.
"""

from __future__ import annotations

from dataclasses import replace

from .config import (
    STRATEGY_KINDS,
    CovariateSpec,
    DatasetSpec,
    ModelSpec,
    PartitionSpec,
    ScenarioConfig,
    TopologyConfig,
)
from .decision_engine import EngineConfig
from .errors import NotFoundError

ROWS = ("iid", "pathological", "nonpathological", "quantity_skew", "tiny_shards")
STRATEGIES = ("s1", "s2", "s3", "s4", "adaptive")

QUANTITY_SKEW_RATIOS = (0.30, 0.20, 0.15, 0.10, 0.08, 0.06, 0.04, 0.03, 0.02, 0.02)
TINY_SHARD_RATIOS = (0.16, 0.14, 0.12, 0.11, 0.10, 0.09, 0.08, 0.07, 0.07, 0.06)
TINY_SHARD_POOL = 0.3


def _base() -> ScenarioConfig:
    # One learner and network for every row, so rows differ only in how the
    # data is split. Models train from scratch on a dense, mostly trusted
    # graph; clients look two hops out for peers.
    return ScenarioConfig(
        clients=10,
        rounds=30,
        dataset=DatasetSpec(class_count=10, dim=32, samples_per_class=200, class_separation=3.0),
        topology=TopologyConfig(p=0.6, trust_fraction=0.9),
        model=ModelSpec(hidden_dim=32, init="seeded_uniform", init_scale=0.1),
        engine=EngineConfig(k_degree=2),
    )


def _row(name: str) -> ScenarioConfig:
    base = _base()
    if name == "iid":
        return base
    if name == "pathological":
        return replace(base, partition=PartitionSpec(regime="pathological", labels_per_client=2))
    if name == "nonpathological":
        return replace(base, covariate=CovariateSpec(enabled=True))
    if name == "quantity_skew":
        return replace(
            base, partition=PartitionSpec(regime="quantity_skew", ratios=QUANTITY_SKEW_RATIOS)
        )
    if name == "tiny_shards":
        return replace(
            base,
            partition=PartitionSpec(
                regime="quantity_skew", ratios=TINY_SHARD_RATIOS, pool_fraction=TINY_SHARD_POOL
            ),
        )
    raise NotFoundError(f"unknown preset row {name!r}")


def preset_names() -> list[str]:
    return [f"{row}-{strategy}" for row in ROWS for strategy in STRATEGIES]


def preset(name: str, seed: int | None = None) -> ScenarioConfig:
    """Look up ``ROW`` (adaptive engine) or ``ROW-STRATEGY``, e.g. ``pathological-s1``."""
    row, _, strategy = name.partition("-")
    strategy = strategy or "adaptive"
    if row not in ROWS or strategy not in STRATEGIES:
        raise NotFoundError(
            f"unknown preset {name!r}; valid names: {', '.join(ROWS + tuple(preset_names()))}"
        )
    config = _row(row)
    config = replace(
        config,
        name=f"{row}-{strategy}",
        engine=replace(config.engine, allowed=STRATEGY_KINDS[strategy]),
    )
    if seed is not None:
        config = replace(config, seed=seed)
    return config
