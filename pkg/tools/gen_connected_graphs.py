"""Regenerate tests/data/connected_graphs.txt (needs networkx, not a package dependency).

Each line is ``n mask``: ``mask`` is the upper-triangle adjacency of one
connected graph on ``n`` nodes, one representative per isomorphism class.
Bit ``b`` corresponds to pair ``(i, j)``, ``i < j``, in row-major order.
"""

from __future__ import annotations

import itertools
import sys
from pathlib import Path

import networkx as nx


def mask_of(graph: nx.Graph, n: int) -> int:
    pairs = list(itertools.combinations(range(n), 2))
    return sum(1 << b for b, (i, j) in enumerate(pairs) if graph.has_edge(i, j))


def all_graphs(max_n: int) -> dict[int, list[nx.Graph]]:
    by_n: dict[int, list[nx.Graph]] = {1: [nx.empty_graph(1)]}
    for n in range(2, max_n + 1):
        buckets: dict[str, list[nx.Graph]] = {}
        for base in by_n[n - 1]:
            for r in range(n):
                for nbrs in itertools.combinations(range(n - 1), r):
                    g = base.copy()
                    g.add_node(n - 1)
                    g.add_edges_from((n - 1, v) for v in nbrs)
                    key = nx.weisfeiler_lehman_graph_hash(g, iterations=3)
                    bucket = buckets.setdefault(key, [])
                    if not any(nx.is_isomorphic(g, h) for h in bucket):
                        bucket.append(g)
        by_n[n] = [g for bucket in buckets.values() for g in bucket]
    return by_n


def main(max_n: int = 8) -> None:
    out = Path(__file__).resolve().parents[1] / "tests" / "data" / "connected_graphs.txt"
    lines = []
    for n, graphs in sorted(all_graphs(max_n).items()):
        masks = sorted(mask_of(g, n) for g in graphs if nx.is_connected(g))
        lines.extend(f"{n} {m}" for m in masks)
    out.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 8)
