"""Per-client exchange decisions: discover peers, score candidate actions, pick under budget.

Actions are *pulls*: the deciding client is ``dst`` and the peer holding the
model or data is ``src``. The deciding client's bandwidth is the budget its
selection must fit in.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .cost_model import (
    ActionKind,
    PayloadDescriptor,
    SizeModel,
    comm_cost,
    compute_capacity,
    packet_size,
)
from .errors import ConfigurationError
from .network_graph import NetworkGraph, bfs_k_degree

if TYPE_CHECKING:
    from .simulator import ClientState

ALL_KINDS = frozenset(ActionKind)
_KIND_ORDER = {
    ActionKind.SHARE_MODEL: 0,
    ActionKind.SHARE_PARTIAL_MODEL: 1,
    ActionKind.SHARE_RAW_DATA: 2,
    ActionKind.SHARE_SYNTHETIC_DATA: 3,
}
PRIORITY_FORMULAS = ("ratio", "penalty")
TRUST_BRANCHES = ("prose", "paper_literal")


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    src: int
    dst: int
    payload: PayloadDescriptor
    cost: int
    reward: float = 0.0

    def __post_init__(self) -> None:
        if self.src == self.dst:
            raise ConfigurationError(f"action from client {self.src} to itself")
        if self.cost < 0:
            raise ConfigurationError("action cost must be >= 0")


@dataclass
class ActionHistory:
    """Recent executed actions of one client plus realised reward observations."""

    window: int = 3
    entries: deque[tuple[int, ActionKind, int]] = field(default_factory=deque)
    observations: dict[tuple[ActionKind, int], list[float]] = field(default_factory=dict)

    def record(self, round_: int, kind: ActionKind, peer: int) -> None:
        if self.entries and round_ < self.entries[-1][0]:
            raise ConfigurationError("history is append-only: round went backwards")
        self.entries.append((round_, ActionKind(kind), peer))
        while self.entries and self.entries[0][0] <= round_ - self.window:
            self.entries.popleft()

    def recent(self, current_round: int) -> list[tuple[int, ActionKind, int]]:
        """Entries from rounds ``current_round - window .. current_round - 1``."""
        lo = current_round - self.window
        return [e for e in self.entries if lo <= e[0] < current_round]

    def has_recent_model_share(self, current_round: int) -> bool:
        return any(kind.is_model for _, kind, _ in self.recent(current_round))

    def observe(self, kind: ActionKind, peer: int, delta: float) -> None:
        self.observations.setdefault((ActionKind(kind), peer), []).append(delta)


@dataclass(frozen=True)
class EngineConfig:
    k_degree: int = 1
    window: int = 3
    score_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    priority: str = "ratio"
    penalty_lambda: float = 1.0
    greedy_skip: bool = False
    trust_branch: str = "prose"
    share_fraction: float = 0.1
    adaptive_rewards: bool = True
    reward_decay: float = 0.5
    literal_bfs: bool = False
    allowed: frozenset[ActionKind] = ALL_KINDS

    def __post_init__(self) -> None:
        if self.k_degree < 0:
            raise ConfigurationError("engine.k_degree must be >= 0")
        if self.window < 1:
            raise ConfigurationError("engine.window must be >= 1")
        if len(self.score_weights) != 4 or any(w < 0 for w in self.score_weights):
            raise ConfigurationError("engine.score_weights must be four non-negative numbers")
        if self.priority not in PRIORITY_FORMULAS:
            raise ConfigurationError(f"engine.priority must be one of {PRIORITY_FORMULAS}")
        if self.trust_branch not in TRUST_BRANCHES:
            raise ConfigurationError(f"engine.trust_branch must be one of {TRUST_BRANCHES}")
        if not 0.0 < self.share_fraction <= 1.0:
            raise ConfigurationError("engine.share_fraction must lie in (0, 1]")
        if not 0.0 <= self.reward_decay < 1.0:
            raise ConfigurationError("engine.reward_decay must lie in [0, 1)")
        object.__setattr__(self, "allowed", frozenset(ActionKind(k) for k in self.allowed))
        if not self.allowed:
            raise ConfigurationError("engine.allowed must name at least one action kind")


def total_variation(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """TV distance between two label histograms (normalised to distributions)."""
    a = np.asarray(hist_a, dtype=np.float64)
    b = np.asarray(hist_b, dtype=np.float64)
    if a.sum() == 0 or b.sum() == 0:
        return 0.0 if a.sum() == b.sum() else 1.0
    return 0.5 * float(np.abs(a / a.sum() - b / b.sum()).sum())


def score_context(
    client: ClientState,
    peer: ClientState,
    weights: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
) -> float:
    """Weighted sum of accuracy gap, relative data size, label divergence and peer capacity.

    Clamped to [0, 1].
    """
    w_gap, w_size, w_div, w_cap = weights
    gap = max(0.0, peer.accuracy - client.accuracy)
    total = peer.shard_size + client.shard_size
    size_ratio = peer.shard_size / total if total else 0.0
    divergence = total_variation(peer.label_hist, client.label_hist)
    capacity = compute_capacity(peer.resources)
    score = w_gap * gap + w_size * size_ratio + w_div * divergence + w_cap * capacity
    return min(1.0, max(0.0, score))


def estimate_reward(action: Action, observed: Sequence[float], decay: float = 0.5) -> float:
    """EMA of realised accuracy deltas for this action's (kind, peer), seeded with the first.

    Falls back to the action's static ranking reward when nothing has been observed.
    """
    if not observed:
        return action.reward
    estimate = observed[0]
    for delta in observed[1:]:
        estimate = decay * estimate + (1.0 - decay) * delta
    return estimate


def _model_kind(client: ClientState, allowed: frozenset[ActionKind]) -> ActionKind:
    partial_ok = ActionKind.SHARE_PARTIAL_MODEL in allowed
    if partial_ok and (
        ActionKind.SHARE_MODEL not in allowed or bool(client.model.frozen_mask.any())
    ):
        return ActionKind.SHARE_PARTIAL_MODEL
    return ActionKind.SHARE_MODEL


def _data_kind(client: ClientState, peer: ClientState, trust_branch: str) -> ActionKind:
    trusted = client.id in peer.trusted_peers
    if trust_branch == "paper_literal":
        trusted = not trusted
    return ActionKind.SHARE_RAW_DATA if trusted else ActionKind.SHARE_SYNTHETIC_DATA


def ranking(
    client: ClientState,
    peers: Iterable[ClientState],
    history: ActionHistory,
    current_round: int,
    config: EngineConfig,
    size_model: SizeModel,
) -> list[tuple[Action, float]]:
    """Candidate actions for ``client``, peers ascending, model action before data action.

    Candidates whose payload would be empty (fully frozen partial model, no
    unseen raw rows, no generator) are not emitted.
    """
    out: list[tuple[Action, float]] = []
    cooling = history.has_recent_model_share(current_round)
    for peer in sorted(peers, key=lambda p: p.id):
        if peer.id == client.id:
            continue
        candidates: list[tuple[ActionKind, PayloadDescriptor, float]] = []
        if peer.accuracy > client.accuracy and not cooling:
            kind = _model_kind(client, config.allowed)
            count = (
                peer.model.unfrozen_count
                if kind is ActionKind.SHARE_PARTIAL_MODEL
                else peer.model.arch.param_count
            )
            if count > 0:
                reward = (client.accuracy + peer.accuracy) / 2.0
                candidates.append((kind, PayloadDescriptor(param_count=count), reward))

        kind = _data_kind(client, peer, config.trust_branch)
        wanted = math.ceil(config.share_fraction * peer.shard_size)
        if kind is ActionKind.SHARE_RAW_DATA:
            available = peer.shard_size - client.raw_received_from(peer.id)
        else:
            available = wanted if peer.generator is not None else 0
        count = min(wanted, available)
        if count > 0:
            reward = score_context(client, peer, config.score_weights)
            candidates.append((kind, PayloadDescriptor(sample_count=count), reward))

        for kind, payload, reward in candidates:
            action = Action(
                kind,
                src=peer.id,
                dst=client.id,
                payload=payload,
                cost=packet_size(kind, payload, size_model),
                reward=reward,
            )
            if config.adaptive_rewards:
                observed = history.observations.get((kind, peer.id), [])
                refined = max(0.0, estimate_reward(action, observed, config.reward_decay))
                action = replace(action, reward=refined)
            out.append((action, action.reward))
    return out


def priority(action: Action, reward: float, bandwidth: float, config: EngineConfig, alpha: float) -> float:
    channel = comm_cost(bandwidth, action.cost, alpha)
    if config.priority == "penalty":
        return reward - config.penalty_lambda * channel
    return reward / (1.0 + channel)


def priority_order(
    scored: Sequence[tuple[Action, float]],
    bandwidth: float,
    config: EngineConfig,
    alpha: float = 1.0,
) -> list[Action]:
    """All actions in queue-pop order (highest priority, then lower peer, then model first)."""
    heap = [
        (-priority(a, r, bandwidth, config, alpha), a.src, _KIND_ORDER[a.kind], i)
        for i, (a, r) in enumerate(scored)
    ]
    heapq.heapify(heap)
    return [scored[heapq.heappop(heap)[3]][0] for _ in range(len(heap))]


def select_actions(
    bandwidth: float,
    scored: Sequence[tuple[Action, float]],
    config: EngineConfig,
    alpha: float = 1.0,
) -> list[Action]:
    """Greedy budgeted selection.

    Default behaviour stops at the first action that no longer fits, so the
    result is the longest prefix of the priority order that fits the budget;
    with ``config.greedy_skip`` it skips that action and keeps going.
    """
    if bandwidth <= 0 or not scored:
        return []
    selected: list[Action] = []
    spent = 0
    for action in priority_order(scored, bandwidth, config, alpha):
        if action.cost > bandwidth - spent:
            if config.greedy_skip:
                continue
            break
        selected.append(action)
        spent += action.cost
    return selected


@dataclass(frozen=True)
class DecisionEngine:
    config: EngineConfig = field(default_factory=EngineConfig)
    size_model: SizeModel = field(default_factory=SizeModel)

    def rank(
        self, client: ClientState, peers: Iterable[ClientState], current_round: int
    ) -> list[tuple[Action, float]]:
        scored = ranking(
            client, peers, client.action_history, current_round, self.config, self.size_model
        )
        return [(a, r) for a, r in scored if a.kind in self.config.allowed]

    def pre_communication(
        self,
        client: ClientState,
        graph: NetworkGraph,
        states: Mapping[int, ClientState],
        current_round: int,
    ) -> list[Action]:
        """BFS to ``client.k_degree`` hops, rank the peers found, select under budget."""
        reached = bfs_k_degree(
            graph, client.id, client.k_degree, literal_hop_limit=self.config.literal_bfs
        )
        peers = [states[p] for p in reached[1:]]
        scored = self.rank(client, peers, current_round)
        return select_actions(
            client.resources.bandwidth, scored, self.config, self.size_model.alpha
        )


def strategy_filter(engine: DecisionEngine, allowed: Iterable[ActionKind | str]) -> DecisionEngine:
    """Engine whose ranking output is restricted to ``allowed`` kinds."""
    kinds = frozenset(ActionKind(k) for k in allowed)
    if not kinds:
        raise ConfigurationError("strategy filter needs at least one allowed action kind")
    return replace(engine, config=replace(engine.config, allowed=kinds))
