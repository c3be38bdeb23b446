"""Dynamic peer-to-peer topology: construction, churn and k-hop peer discovery."""

from __future__ import annotations

import copy
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NotFoundError, UndefinedValueError

ClientId = int
Edge = tuple[int, int]

TOPOLOGY_MODELS = ("erdos_renyi", "ring", "complete")


def _edge(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


def _check_probability(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise ConfigurationError(f"{name} must be a probability in [0, 1], got {value!r}")


@dataclass
class NetworkGraph:
    """Undirected peer graph with trust-labelled edges.

    ``departed`` keeps the ids of nodes that left the network so that churn can
    bring them back; ``next_id`` is the id handed to the next fresh node.
    """

    nodes: set[int] = field(default_factory=set)
    adjacency: dict[int, set[int]] = field(default_factory=dict)
    trusted: set[Edge] = field(default_factory=set)
    round: int = 0
    departed: set[int] = field(default_factory=set)
    next_id: int = 0

    def add_node(self, node: int) -> None:
        self.nodes.add(node)
        self.adjacency.setdefault(node, set())
        self.departed.discard(node)
        self.next_id = max(self.next_id, node + 1)

    def add_edge(self, u: int, v: int, trusted: bool = False) -> None:
        if u == v:
            raise ConfigurationError(f"self-loop on node {u}")
        if u not in self.nodes or v not in self.nodes:
            raise NotFoundError(f"edge ({u}, {v}) references an unknown node")
        self.adjacency[u].add(v)
        self.adjacency[v].add(u)
        if trusted:
            self.trusted.add(_edge(u, v))

    def remove_edge(self, u: int, v: int) -> None:
        self.adjacency[u].discard(v)
        self.adjacency[v].discard(u)
        self.trusted.discard(_edge(u, v))

    def remove_node(self, node: int) -> None:
        for other in list(self.adjacency.get(node, ())):
            self.remove_edge(node, other)
        self.adjacency.pop(node, None)
        self.nodes.discard(node)
        self.departed.add(node)

    def neighbors(self, node: int) -> list[int]:
        if node not in self.nodes:
            raise NotFoundError(f"client {node} is not in the graph")
        return sorted(self.adjacency[node])

    def edges(self) -> list[Edge]:
        return sorted({_edge(u, v) for u, vs in self.adjacency.items() for v in vs})

    @property
    def edge_count(self) -> int:
        return sum(len(vs) for vs in self.adjacency.values()) // 2

    def is_trusted(self, u: int, v: int) -> bool:
        return _edge(u, v) in self.trusted

    def trusted_peers(self, node: int) -> set[int]:
        return {v for v in self.adjacency.get(node, ()) if _edge(node, v) in self.trusted}

    def copy(self) -> NetworkGraph:
        return copy.deepcopy(self)

    def validate(self) -> None:
        """Raise ``ConfigurationError`` if any structural invariant is broken."""
        if set(self.adjacency) != self.nodes:
            raise ConfigurationError("adjacency keys differ from node set")
        for u, vs in self.adjacency.items():
            if u in vs:
                raise ConfigurationError(f"self-loop on node {u}")
            for v in vs:
                if v not in self.nodes:
                    raise ConfigurationError(f"edge ({u}, {v}) leaves the node set")
                if u not in self.adjacency[v]:
                    raise ConfigurationError(f"edge ({u}, {v}) is not symmetric")
        for u, v in self.trusted:
            if v not in self.adjacency.get(u, ()):
                raise ConfigurationError(f"trusted pair ({u}, {v}) is not an edge")
        if self.nodes & self.departed:
            raise ConfigurationError("a node is both live and departed")


@dataclass(frozen=True)
class TopologySpec:
    node_count: int
    model: str = "erdos_renyi"
    p: float = 0.3
    k: int = 1
    trust_fraction: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class ChurnConfig:
    p_leave: float = 0.0
    p_join: float = 0.0
    join_degree: int = 2
    p_rewire: float = 0.0
    # Per departed node per round; 0 keeps departures permanent.
    p_rejoin: float = 0.0

    def __post_init__(self) -> None:
        for name in ("p_leave", "p_join", "p_rewire", "p_rejoin"):
            _check_probability(name, getattr(self, name))
        if self.join_degree < 1:
            raise ConfigurationError(f"join_degree must be >= 1, got {self.join_degree}")

    @property
    def inactive(self) -> bool:
        return self.p_leave == self.p_join == self.p_rewire == self.p_rejoin == 0.0


@dataclass
class ChurnDelta:
    departed: list[int] = field(default_factory=list)
    joined: list[int] = field(default_factory=list)
    rejoined: list[int] = field(default_factory=list)
    rewired: list[tuple[Edge, Edge]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.departed or self.joined or self.rejoined or self.rewired)


@dataclass
class BfsStats:
    """Instrumentation counters filled in by :func:`bfs_k_degree`."""

    nodes_visited: int = 0
    edges_inspected: int = 0


def build_graph(spec: TopologySpec) -> NetworkGraph:
    """Build a seeded topology with ``floor(trust_fraction * E)`` trusted edges."""
    if spec.node_count < 1:
        raise ConfigurationError(f"node_count must be >= 1, got {spec.node_count}")
    _check_probability("trust_fraction", spec.trust_fraction)
    if spec.model not in TOPOLOGY_MODELS:
        raise ConfigurationError(
            f"unknown topology model {spec.model!r}; expected one of {TOPOLOGY_MODELS}"
        )

    n = spec.node_count
    graph = NetworkGraph()
    for node in range(n):
        graph.add_node(node)

    if spec.model == "complete":
        for u in range(n):
            for v in range(u + 1, n):
                graph.add_edge(u, v)
    elif spec.model == "ring":
        if spec.k < 1:
            raise ConfigurationError(f"ring k must be >= 1, got {spec.k}")
        for u in range(n):
            for offset in range(1, spec.k + 1):
                v = (u + offset) % n
                if v != u:
                    graph.add_edge(u, v)
    else:
        _check_probability("p", spec.p)
        rng = np.random.default_rng([spec.seed, 0])
        for u in range(n):
            draws = rng.random(n - u - 1)
            for offset, draw in enumerate(draws):
                if draw < spec.p:
                    graph.add_edge(u, u + 1 + offset)

    edges = graph.edges()
    n_trusted = math.floor(spec.trust_fraction * len(edges))
    if n_trusted:
        rng = np.random.default_rng([spec.seed, 1])
        picked = rng.choice(len(edges), size=n_trusted, replace=False)
        graph.trusted = {edges[i] for i in sorted(picked)}
    return graph


def bfs_k_degree(
    graph: NetworkGraph,
    client: int,
    k: int,
    *,
    literal_hop_limit: bool = False,
    stats: BfsStats | None = None,
) -> list[int]:
    """Return every node within ``k`` hops of ``client`` in BFS order, ``client`` first.

    Neighbours are expanded in ascending id order. With ``literal_hop_limit``
    every enqueued child carries ``k - 1`` instead of ``current_k - 1``, so
    the hop limit is never enforced past the first level: for ``k >= 2`` the
    whole connected component is returned.
    """
    if client not in graph.nodes:
        raise NotFoundError(f"client {client} is not in the graph")
    if k < 0:
        raise ConfigurationError(f"k must be >= 0, got {k}")

    order: list[int] = []
    queue: deque[tuple[int, int]] = deque([(client, k)])
    seen = {client}
    while queue:
        peer, current_k = queue.popleft()
        order.append(peer)
        if stats is not None:
            stats.nodes_visited += 1
        if current_k == 0:
            continue
        child_k = k - 1 if literal_hop_limit else current_k - 1
        for child in sorted(graph.adjacency[peer]):
            if stats is not None:
                stats.edges_inspected += 1
            if child in seen:
                continue
            seen.add(child)
            queue.append((child, child_k))
    return order


def _attach(graph: NetworkGraph, node: int, degree: int, rng: np.random.Generator) -> None:
    candidates = sorted(graph.nodes - {node})
    count = min(degree, len(candidates))
    if count:
        for idx in sorted(rng.choice(len(candidates), size=count, replace=False)):
            graph.add_edge(node, candidates[idx])


def apply_churn(
    graph: NetworkGraph, churn: ChurnConfig, rng_seed: int | list[int]
) -> tuple[NetworkGraph, ChurnDelta]:
    """Apply one round of departures, rejoins, fresh joins and rewiring.

    The input graph is not modified. Draws are made in a fixed order (nodes and
    edges ascending) so a given seed always yields the same delta.
    """
    out = graph.copy()
    delta = ChurnDelta()
    if churn.inactive or not (graph.nodes or graph.departed):
        return out, delta
    rng = np.random.default_rng(rng_seed)

    previously_departed = sorted(out.departed)
    for node in sorted(out.nodes):
        if rng.random() < churn.p_leave:
            delta.departed.append(node)
    for node in delta.departed:
        out.remove_node(node)

    for node in previously_departed:
        if rng.random() < churn.p_rejoin:
            delta.rejoined.append(node)
    for node in delta.rejoined:
        out.add_node(node)
        _attach(out, node, churn.join_degree, rng)

    if rng.random() < churn.p_join:
        node = out.next_id
        delta.joined.append(node)
        out.add_node(node)
        _attach(out, node, churn.join_degree, rng)

    if churn.p_rewire > 0.0:
        for u, v in out.edges():
            if rng.random() >= churn.p_rewire:
                continue
            candidates = sorted(out.nodes - out.adjacency[u] - {u})
            if not candidates:
                continue
            w = candidates[int(rng.integers(len(candidates)))]
            out.remove_edge(u, v)
            out.add_edge(u, w)
            delta.rewired.append(((u, v), _edge(u, w)))
    return out, delta


def average_degree(graph: NetworkGraph) -> float:
    """Return ``2E / V``."""
    if not graph.nodes:
        raise UndefinedValueError("average degree of an empty graph is undefined")
    return 2 * graph.edge_count / len(graph.nodes)
