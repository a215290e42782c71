"""Sample-quality metrics: validity, degree-distribution KL, novelty and condition matching."""

from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .graphcore import Graph

__all__ = [
    "num_components",
    "is_connected",
    "is_cycle",
    "is_tree",
    "is_valid",
    "cycle_rank",
    "condition_of",
    "cond_match",
    "degree_histogram",
    "degree_kl",
    "wl_hash",
    "isomorphic",
    "novelty_and_uniqueness",
    "metrics_report",
    "TASKS",
]

TASKS = ("cycles", "trees", "ba", "conditional")
EXACT_ISO_MAX_NODES = 8


def num_components(g: Graph) -> int:
    parent = list(range(g.num_nodes))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    count = g.num_nodes
    for u, v, _ in g.edges:
        a, b = find(u), find(v)
        if a != b:
            parent[a] = b
            count -= 1
    return count


def is_connected(g: Graph) -> bool:
    return num_components(g) == 1


def is_cycle(g: Graph) -> bool:
    return g.num_nodes >= 3 and bool(np.all(g.degrees() == 2)) and is_connected(g)


def is_tree(g: Graph) -> bool:
    return g.num_nodes >= 1 and g.num_edges == g.num_nodes - 1 and is_connected(g)


def is_valid(g: Graph, task: str) -> bool:
    """Task predicate; truncated samples are never valid."""
    if "truncated" in g.flags or "grammar_error" in g.flags:
        return False
    if task == "cycles":
        return is_cycle(g)
    if task == "trees":
        return is_tree(g)
    raise ValueError(f"no validity predicate for task {task!r}")


def cycle_rank(g: Graph) -> int:
    return g.num_edges - g.num_nodes + num_components(g)


def condition_of(g: Graph) -> np.ndarray:
    """Raw condition vector (node count, edge count, cycle rank)."""
    return np.array([g.num_nodes, g.num_edges, cycle_rank(g)], dtype=np.float64)


def cond_match(g: Graph, c: Sequence[float]) -> dict[str, bool]:
    got = condition_of(g)
    fields = {"nodes": got[0] == c[0], "edges": got[1] == c[1], "rank": got[2] == c[2]}
    if "truncated" in g.flags or "grammar_error" in g.flags:
        fields = dict.fromkeys(fields, False)
    out = {k: bool(v) for k, v in fields.items()}
    out["all"] = all(out.values())
    return out


# ---------------------------------------------------------------------------
# degree distribution


def degree_histogram(graphs: Iterable[Graph]) -> Counter:
    hist: Counter = Counter()
    for g in graphs:
        hist.update(g.degrees().tolist())
    return hist


def degree_kl(samples: Sequence[Graph], reference: Sequence[Graph], alpha: float = 1e-6,
              reverse: bool = False) -> float:
    """KL(sample degrees || reference degrees) over pooled node degrees.

    Both histograms are normalized, ``alpha`` is added to every bin of the
    union support and the result renormalized.  ``reverse`` swaps the
    arguments of the divergence.
    """
    hs, hr = degree_histogram(samples), degree_histogram(reference)
    if not hs or not hr:
        raise ValueError("degree_kl needs at least one node on each side")
    support = sorted(set(hs) | set(hr))
    p = np.array([hs[d] for d in support], dtype=np.float64)
    q = np.array([hr[d] for d in support], dtype=np.float64)
    p = p / p.sum() + alpha
    q = q / q.sum() + alpha
    p /= p.sum()
    q /= q.sum()
    if reverse:
        p, q = q, p
    return float(np.sum(p * np.log(p / q)))


# ---------------------------------------------------------------------------
# Weisfeiler-Lehman fingerprints


def _h(*parts) -> str:
    return hashlib.blake2b(repr(parts).encode(), digest_size=12).hexdigest()


def wl_hash(g: Graph, rounds: int = 3) -> str:
    """Isomorphism-invariant fingerprint from ``rounds`` of label refinement.

    Node labels start from node types and absorb the sorted multiset of
    (edge type, neighbour label) pairs each round; the fingerprint hashes the
    label histograms of every round.
    """
    adj: list[list[tuple[int, int]]] = [[] for _ in range(g.num_nodes)]
    for u, v, t in g.edges:
        adj[u].append((v, t))
        adj[v].append((u, t))
    labels = [_h("t", k) for k in g.node_types]
    history = [tuple(sorted(Counter(labels).items()))]
    for _ in range(rounds):
        labels = [_h(labels[x], tuple(sorted((t, labels[y]) for y, t in adj[x])))
                  for x in range(g.num_nodes)]
        history.append(tuple(sorted(Counter(labels).items())))
    return _h(g.num_nodes, g.num_edges, tuple(history))


def _to_nx(g: Graph) -> nx.Graph:
    G = nx.Graph()
    for v, k in enumerate(g.node_types):
        G.add_node(v, t=k)
    for u, v, t in g.edges:
        G.add_edge(u, v, t=t)
    return G


def isomorphic(a: Graph, b: Graph) -> bool:
    if a.num_nodes != b.num_nodes or a.num_edges != b.num_edges:
        return False
    match = lambda x, y: x["t"] == y["t"]  # noqa: E731
    return nx.is_isomorphic(_to_nx(a), _to_nx(b), node_match=match, edge_match=match)


class _Index:
    """Graphs bucketed by fingerprint; small graphs are compared exactly."""

    def __init__(self):
        self.buckets: dict[str, list[Graph]] = defaultdict(list)

    def contains(self, g: Graph, key: str | None = None) -> bool:
        key = key or wl_hash(g)
        bucket = self.buckets.get(key)
        if not bucket:
            return False
        if g.num_nodes > EXACT_ISO_MAX_NODES:
            return True
        return any(isomorphic(g, h) for h in bucket)

    def add(self, g: Graph, key: str | None = None) -> None:
        self.buckets[key or wl_hash(g)].append(g)


def novelty_and_uniqueness(samples: Sequence[Graph],
                           training: Sequence[Graph]) -> dict[str, float]:
    if not samples:
        raise ValueError("no samples")
    train_idx = _Index()
    for g in training:
        key = wl_hash(g)
        if not train_idx.contains(g, key):
            train_idx.add(g, key)
    seen = _Index()
    novel = unique = 0
    for g in samples:
        key = wl_hash(g)
        if not train_idx.contains(g, key):
            novel += 1
        if not seen.contains(g, key):
            seen.add(g, key)
            unique += 1
    n = len(samples)
    return {"pct_novel": novel / n, "pct_unique": unique / n}


# ---------------------------------------------------------------------------
# report


def metrics_report(samples: Sequence[Graph], reference: Sequence[Graph], task: str,
                   conditions: Sequence[Sequence[float]] | None = None,
                   reverse_kl: bool = False) -> dict:
    """Metrics dict with the keys of the JSON report format.

    ``pct_valid`` is ``None`` for tasks without a validity predicate;
    ``cond_match`` holds per-field match rates when conditions are given.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if not samples or not reference:
        raise ValueError("samples and reference must both be nonempty")
    report: dict = {"num_samples": len(samples)}
    report["pct_valid"] = (float(np.mean([is_valid(g, task) for g in samples]))
                           if task in ("cycles", "trees") else None)
    report.update(novelty_and_uniqueness(samples, reference))
    try:
        report["degree_kl"] = degree_kl(samples, reference, reverse=reverse_kl)
    except ValueError:
        report["degree_kl"] = None
    if conditions is not None:
        if len(conditions) != len(samples):
            raise ValueError("need one condition per sample")
        rows = [cond_match(g, c) for g, c in zip(samples, conditions)]
        report["cond_match"] = {k: float(np.mean([r[k] for r in rows]))
                                for k in ("nodes", "edges", "rank", "all")}
    else:
        report["cond_match"] = None
    return report
