"""Round-driven orchestration of the peer-to-peer exchange simulation.

Every random draw comes from a stream keyed by ``(global seed, purpose, client,
round)``, so results do not depend on the order clients are processed in.
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from . import learner
from .config import ScenarioConfig
from .cost_model import ActionKind, DeviceResources, packet_size
from .decision_engine import Action, ActionHistory, DecisionEngine
from .errors import InternalError, SimulationError
from .learner import Generator, Model
from .network_graph import (
    ChurnDelta,
    NetworkGraph,
    TopologySpec,
    apply_churn,
    build_graph,
)
from .partitioner import (
    Dataset,
    Shard,
    ShardView,
    generate_dataset,
    label_histogram,
    load_csv,
    make_covariate_transforms,
    partition_iid,
    partition_pathological,
    partition_quantity_skew,
    shard_view,
    split_holdout,
)

# Stream tags for seeded RNG derivation.
_SPLIT, _PRETRAIN_SPLIT, _POOL, _PARTITION, _COVARIATE = 1, 2, 3, 4, 5
_RESOURCES, _CHURN, _TRAIN, _RAW, _SYNTH, _JOIN, _PRETRAIN = 6, 7, 8, 9, 10, 11, 12

METRICS_COLUMNS = (
    "round",
    "client_id",
    "accuracy",
    "best_accuracy",
    "bytes_sent",
    "bytes_received",
    "action_kind",
    "action_peer",
    "action_cost",
    "realized_reward",
)


@dataclass
class ReceivedData:
    """Samples delivered by peers, kept across rounds unless retention is off."""

    dim: int
    features: list[np.ndarray] = field(default_factory=list)
    labels: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    raw_from: dict[int, set[int]] = field(default_factory=dict)

    def add(
        self,
        view: ShardView,
        weight: float,
        src: int | None = None,
        raw_indices: np.ndarray | None = None,
    ) -> None:
        if len(view) == 0:
            return
        self.features.append(np.asarray(view.features, dtype=np.float64))
        self.labels.append(np.asarray(view.labels, dtype=np.int64))
        self.weights.append(np.full(len(view), weight))
        if raw_indices is not None:
            self.raw_from.setdefault(src, set()).update(int(i) for i in raw_indices)

    def clear(self) -> None:
        self.features.clear()
        self.labels.clear()
        self.weights.clear()

    def __len__(self) -> int:
        return sum(len(y) for y in self.labels)


@dataclass
class ClientState:
    id: int
    shard: Shard
    view: ShardView
    model: Model
    resources: DeviceResources
    k_degree: int
    generator: Generator | None
    received: ReceivedData
    action_history: ActionHistory
    label_hist: np.ndarray
    trusted_peers: set[int] = field(default_factory=set)
    accuracy: float = 0.0
    best_accuracy: float = 0.0
    accuracy_series: list[float] = field(default_factory=list)
    active: bool = True

    @property
    def shard_size(self) -> int:
        return len(self.view)

    @property
    def train_size(self) -> int:
        return len(self.view) + len(self.received)

    def raw_received_from(self, peer: int) -> int:
        return len(self.received.raw_from.get(peer, ()))

    def training_set(self, synthetic_weight: float = 1.0) -> tuple[ShardView, np.ndarray | None]:
        if not self.received.labels:
            return self.view, None
        features = np.concatenate([self.view.features, *self.received.features])
        labels = np.concatenate([self.view.labels, *self.received.labels])
        weights = np.concatenate([np.ones(len(self.view)), *self.received.weights])
        if np.all(weights == 1.0):
            return ShardView(features, labels), None
        return ShardView(features, labels), weights


@dataclass(frozen=True)
class ActionRecord:
    kind: str
    peer: int
    cost: int
    realized_reward: float | None = None


@dataclass
class RoundRecord:
    round: int
    client_id: int
    accuracy: float
    best_accuracy: float
    bytes_sent: int = 0
    bytes_received: int = 0
    actions: list[ActionRecord] = field(default_factory=list)


@dataclass
class MetricsLog:
    rows: list[RoundRecord] = field(default_factory=list)
    convergence_round: dict[int, int | None] = field(default_factory=dict)
    rounds_run: int = 0
    dropped_actions: int = 0
    total_bytes: int = 0
    action_counts: dict[str, int] = field(default_factory=dict)

    def round_rows(self, round_: int) -> list[RoundRecord]:
        return [r for r in self.rows if r.round == round_]

    def final_rows(self) -> list[RoundRecord]:
        """Last logged row of every client that was ever live."""
        last: dict[int, RoundRecord] = {}
        for row in self.rows:
            last[row.client_id] = row
        return [last[c] for c in sorted(last)]

    def final_mean_best_accuracy(self) -> float:
        rows = self.final_rows()
        return sum(r.best_accuracy for r in rows) / len(rows) if rows else 0.0

    def network_convergence_round(self) -> int | None:
        """Round by which every client had converged, or ``None`` if one never did."""
        if not self.convergence_round or None in self.convergence_round.values():
            return None
        return max(self.convergence_round.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in self.rows:
            writer.writerow(
                [
                    row.round,
                    row.client_id,
                    repr(row.accuracy),
                    repr(row.best_accuracy),
                    row.bytes_sent,
                    row.bytes_received,
                    ";".join(a.kind for a in row.actions),
                    ";".join(str(a.peer) for a in row.actions),
                    ";".join(str(a.cost) for a in row.actions),
                    ";".join("" if a.realized_reward is None else repr(a.realized_reward) for a in row.actions),
                ]
            )
        return buf.getvalue()


def detect_convergence(series: Sequence[float], window: int, epsilon: float) -> int | None:
    """Earliest ``r`` with ``max - min <= epsilon`` over ``series[r : r + window]``."""
    if window < 1 or not epsilon > 0:
        raise SimulationError("window must be >= 1 and epsilon > 0")
    for r in range(len(series) - window + 1):
        chunk = series[r : r + window]
        if max(chunk) - min(chunk) <= epsilon:
            return r
    return None


@dataclass
class SimulationState:
    config: ScenarioConfig
    dataset: Dataset
    test_view: ShardView
    train_pool: np.ndarray
    graph: NetworkGraph
    clients: dict[int, ClientState]
    engine: DecisionEngine
    initial_model: Model
    transforms: dict
    metrics: MetricsLog = field(default_factory=MetricsLog)
    round: int = 0
    last_actions: dict[int, list[tuple[Action, RoundRecord, int]]] = field(default_factory=dict)

    @property
    def live(self) -> list[int]:
        return sorted(self.graph.nodes)


def _seed(config: ScenarioConfig, *parts: int) -> list[int]:
    return [config.seed, *parts]


def _draw_resources(config: ScenarioConfig, cid: int) -> DeviceResources:
    rng = np.random.default_rng(_seed(config, _RESOURCES, cid))
    spec = config.resources
    return DeviceResources(
        power=float(rng.uniform(*spec.power)),
        mem=float(rng.uniform(*spec.mem)),
        bandwidth=float(rng.uniform(*spec.bandwidth)),
    )


def _make_client(
    config: ScenarioConfig, dataset: Dataset, shard: Shard, model: Model
) -> ClientState:
    view = shard_view(dataset, shard)
    generator = (
        learner.fit_generator(view, dataset.class_count, config.model.variance_floor)
        if len(view)
        else None
    )
    return ClientState(
        id=shard.owner,
        shard=shard,
        view=view,
        model=model,
        resources=_draw_resources(config, shard.owner),
        k_degree=config.engine.k_degree,
        generator=generator,
        received=ReceivedData(dataset.dim),
        action_history=ActionHistory(window=config.engine.window),
        label_hist=label_histogram(view.labels, dataset.class_count),
    )


def _initial_model(config: ScenarioConfig, dataset: Dataset, pretrain: np.ndarray) -> Model:
    spec = config.model
    arch = learner.Arch(dataset.dim, dataset.class_count, spec.hidden_dim)
    if spec.foundation:
        view = ShardView(dataset.features[pretrain], dataset.labels[pretrain], pretrain)
        pre_cfg = replace(
            config.train, epochs=spec.pretrain_epochs, seed=config.seed * 1000 + _PRETRAIN
        )
        return learner.pretrain_foundation(
            arch,
            view,
            pre_cfg,
            scale=spec.init_scale,
            seed=config.seed,
            freeze_backbone=spec.freeze_backbone,
        )
    return learner.init_model(
        arch, spec.init, spec.init_scale, config.seed, spec.frozen_fraction
    )


def _partition(
    config: ScenarioConfig, dataset: Dataset, pool: np.ndarray, ids: list[int]
) -> list[Shard]:
    part = config.partition
    seed = _seed(config, _PARTITION)
    if part.regime == "pathological":
        return partition_pathological(dataset, ids, part.labels_per_client, seed, pool)
    if part.regime == "quantity_skew":
        return partition_quantity_skew(dataset, ids, part.ratios, seed, pool)
    return partition_iid(dataset, ids, seed, pool)


def init_state(config: ScenarioConfig) -> SimulationState:
    """Build dataset, splits, topology, shards and clients for round 0."""
    ds = config.dataset
    if ds.csv:
        dataset = load_csv(ds.csv, ds.class_count, config.seed)
    else:
        dataset = generate_dataset(
            ds.class_count, ds.dim, ds.samples_per_class, ds.class_separation, config.seed
        )
    test_idx, rest = split_holdout(np.arange(dataset.n), ds.test_fraction, _seed(config, _SPLIT))
    pretrain_idx, rest = split_holdout(rest, ds.pretrain_fraction, _seed(config, _PRETRAIN_SPLIT))
    train_pool = rest
    if config.partition.pool_fraction < 1.0:
        _, train_pool = split_holdout(
            rest, 1.0 - config.partition.pool_fraction, _seed(config, _POOL)
        )

    graph = build_graph(
        TopologySpec(
            node_count=config.clients,
            model=config.topology.model,
            p=config.topology.p,
            k=config.topology.k,
            trust_fraction=config.topology.trust_fraction,
            seed=config.seed,
        )
    )
    ids = list(range(config.clients))
    shards = _partition(config, dataset, train_pool, ids)
    transforms: dict[int, object] = {}
    if config.covariate.enabled:
        cov = config.covariate
        transforms = make_covariate_transforms(
            ids,
            dataset.dim,
            config.seed * 7919 + _COVARIATE,
            cov.angle,
            cov.scale_range,
            cov.noise_sigma,
            cov.per_class,
        )
        shards = [Shard(s.owner, s.indices, transforms[s.owner]) for s in shards]

    model = _initial_model(config, dataset, pretrain_idx)
    clients = {s.owner: _make_client(config, dataset, s, model) for s in shards}
    for cid, client in clients.items():
        client.trusted_peers = graph.trusted_peers(cid)
    test_view = ShardView(dataset.features[test_idx], dataset.labels[test_idx], test_idx)
    engine = DecisionEngine(config.engine, config.size_model)
    return SimulationState(
        config, dataset, test_view, train_pool, graph, clients, engine, model, transforms
    )


def _join_client(state: SimulationState, cid: int) -> ClientState:
    """A fresh device brings a seeded sample of the training pool (mean shard size)."""
    config = state.config
    rng = np.random.default_rng(_seed(config, _JOIN, cid))
    size = max(1, len(state.train_pool) // max(1, config.clients))
    idx = np.sort(rng.choice(state.train_pool, size=min(size, len(state.train_pool)), replace=False))
    shard = Shard(cid, idx, state.transforms.get(cid))
    if config.covariate.enabled and shard.transform is None:
        cov = config.covariate
        shard = Shard(
            cid,
            idx,
            make_covariate_transforms(
                [cid], state.dataset.dim, config.seed * 7919 + _COVARIATE, cov.angle,
                cov.scale_range, cov.noise_sigma, cov.per_class,
            )[cid],
        )
    return _make_client(config, state.dataset, shard, state.initial_model)


def _phase_churn(state: SimulationState) -> ChurnDelta:
    config = state.config
    graph, delta = apply_churn(state.graph, config.churn, _seed(config, _CHURN, state.round))
    graph.round = state.round
    state.graph = graph
    for cid in delta.departed:
        state.clients[cid].active = False
    for cid in delta.rejoined:
        state.clients[cid].active = True
    for cid in delta.joined:
        state.clients[cid] = _join_client(state, cid)
    for cid in graph.nodes:
        state.clients[cid].trusted_peers = graph.trusted_peers(cid)
    return delta


def _phase_train_and_evaluate(state: SimulationState) -> dict[int, RoundRecord]:
    config = state.config
    records = {}
    for cid in state.live:
        client = state.clients[cid]
        view, weights = client.training_set(config.synthetic_weight)
        if len(view):
            train_cfg = replace(
                config.train, seed=int(np.random.SeedSequence(
                    _seed(config, _TRAIN, config.train.seed, cid, state.round)
                ).generate_state(1)[0])
            )
            try:
                client.model = learner.train_local(client.model, view, train_cfg, weights)
            except SimulationError as exc:
                raise SimulationError(f"round {state.round}, client {cid}: {exc}") from exc
        if not config.retain_received:
            client.received.clear()
        client.accuracy = learner.evaluate(
            client.model, state.test_view.features, state.test_view.labels
        )
        client.best_accuracy = max(client.best_accuracy, client.accuracy)
        client.accuracy_series.append(client.accuracy)
        records[cid] = RoundRecord(state.round, cid, client.accuracy, client.best_accuracy)
    return records


def _credit_realized_rewards(state: SimulationState) -> None:
    """Attribute each client's accuracy change since last round to last round's actions."""
    for cid, entries in state.last_actions.items():
        client = state.clients[cid]
        if not client.active or len(client.accuracy_series) < 2:
            continue
        delta = client.accuracy_series[-1] - client.accuracy_series[-2]
        for action, row, slot in entries:
            client.action_history.observe(action.kind, action.src, delta)
            row.actions[slot] = replace(row.actions[slot], realized_reward=delta)
    state.last_actions = {}


def _execute(state: SimulationState, plans: dict[int, list[Action]], records: dict[int, RoundRecord]) -> None:
    config = state.config
    clients = state.clients
    sent = {cid: 0 for cid in state.live}
    snapshots = {cid: clients[cid].model for cid in state.live}
    sizes = {cid: clients[cid].train_size for cid in state.live}
    incoming: dict[int, list[tuple[Model, int]]] = {}
    partial: dict[int, bool] = {}

    for dst in sorted(plans):
        receiver = clients[dst]
        for action in plans[dst]:
            src = clients[action.src]
            if sent[action.src] + action.cost > src.resources.bandwidth:
                state.metrics.dropped_actions += 1
                continue
            expected = packet_size(action.kind, action.payload, config.size_model)
            if expected != action.cost:
                raise InternalError(f"action cost {action.cost} != packet size {expected}")

            if action.kind.is_model:
                incoming.setdefault(dst, []).append((snapshots[action.src], sizes[action.src]))
                partial[dst] = partial.get(dst, False) or (
                    action.kind is ActionKind.SHARE_PARTIAL_MODEL
                )
            elif action.kind is ActionKind.SHARE_RAW_DATA:
                rng = np.random.default_rng(_seed(config, _RAW, dst, action.src, state.round))
                seen = receiver.received.raw_from.get(action.src, set())
                candidates = [i for i, g in enumerate(src.view.indices) if int(g) not in seen]
                n = action.payload.sample_count
                pick = np.sort(rng.choice(len(candidates), size=n, replace=False))
                rows = np.asarray(candidates, dtype=np.int64)[pick]
                receiver.received.add(
                    ShardView(src.view.features[rows], src.view.labels[rows]),
                    1.0,
                    src=action.src,
                    raw_indices=src.view.indices[rows],
                )
            else:
                synthetic = learner.sample_synthetic(
                    src.generator,
                    action.payload.sample_count,
                    _seed(config, _SYNTH, dst, action.src, state.round),
                )
                receiver.received.add(synthetic, config.synthetic_weight)

            sent[action.src] += action.cost
            records[action.src].bytes_sent += action.cost
            records[dst].bytes_received += action.cost
            state.metrics.total_bytes += action.cost
            state.metrics.action_counts[action.kind.value] = (
                state.metrics.action_counts.get(action.kind.value, 0) + 1
            )
            receiver.action_history.record(state.round, action.kind, action.src)
            records[dst].actions.append(ActionRecord(action.kind.value, action.src, action.cost))
            state.last_actions.setdefault(dst, []).append(
                (action, records[dst], len(records[dst].actions) - 1)
            )

    for dst in sorted(incoming):
        receiver = clients[dst]
        models = [receiver.model] + [m for m, _ in incoming[dst]]
        weights = [max(1, sizes[dst])] + [max(1, w) for _, w in incoming[dst]]
        rule = learner.partial_fedavg if partial[dst] else learner.fedavg
        receiver.model = rule(models, weights)


def run_round(state: SimulationState) -> SimulationState:
    """Churn, local training, evaluation, decisions, execution, metrics (in that order)."""
    _phase_churn(state)
    records = _phase_train_and_evaluate(state)
    _credit_realized_rewards(state)

    snapshot = {cid: state.clients[cid] for cid in state.live}
    plans = {
        cid: state.engine.pre_communication(snapshot[cid], state.graph, snapshot, state.round)
        for cid in state.live
    }
    _execute(state, plans, records)
    state.metrics.rows.extend(records[cid] for cid in sorted(records))
    state.metrics.rounds_run = state.round + 1
    state.round += 1
    return state


def _all_converged(state: SimulationState) -> bool:
    spec = state.config.convergence
    live = state.live
    return bool(live) and all(
        detect_convergence(state.clients[c].accuracy_series, spec.window, spec.epsilon) is not None
        for c in live
    )


def run_simulation(config: ScenarioConfig) -> MetricsLog:
    state = init_state(config)
    for _ in range(config.rounds):
        run_round(state)
        if config.convergence.early_stop and _all_converged(state):
            break
    spec = config.convergence
    state.metrics.convergence_round = {
        cid: detect_convergence(c.accuracy_series, spec.window, spec.epsilon)
        for cid, c in sorted(state.clients.items())
    }
    return state.metrics
