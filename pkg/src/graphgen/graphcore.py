"""Graphs, the add-node/add-edge decision grammar, orderings and synthetic data."""

from __future__ import annotations

import heapq
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

__all__ = [
    "Graph",
    "AddNode",
    "StopNodes",
    "AddEdge",
    "StopEdges",
    "PickNode",
    "Decision",
    "GrammarError",
    "OrderingError",
    "Ordering",
    "GraphBuilder",
    "apply_decision",
    "replay",
    "decisions_from_graph",
    "identity_ordering",
    "uniform_random_ordering",
    "random_full_ordering",
    "canonical_ordering",
    "enumerate_orderings",
    "count_orderings",
    "gen_synthetic",
    "random_tree",
    "graph_with_cycle_rank",
    "write_jsonl",
    "read_jsonl",
    "graph_to_json",
    "graph_from_json",
]


class GrammarError(ValueError):
    """A decision is not legal in the current generation state."""


class OrderingError(ValueError):
    """An ordering does not match its graph."""


@dataclass(frozen=True)
class Graph:
    """Undirected graph with typed nodes and typed edges.

    Edges are stored as ``(u, v, edge_type)`` with ``u < v``, sorted.
    ``flags`` carries sample-quality markers (e.g. ``"truncated"``) and does
    not take part in equality.
    """

    node_types: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...] = ()
    flags: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        n = len(self.node_types)
        canon = []
        seen = set()
        for e in self.edges:
            u, v, t = (int(x) for x in e) if len(e) == 3 else (int(e[0]), int(e[1]), 0)
            if u == v:
                raise ValueError(f"self-loop on node {u}")
            if u > v:
                u, v = v, u
            if u < 0 or v >= n:
                raise ValueError(f"edge ({u}, {v}) has an endpoint outside [0, {n})")
            if (u, v) in seen:
                raise ValueError(f"duplicate edge ({u}, {v})")
            seen.add((u, v))
            canon.append((u, v, t))
        object.__setattr__(self, "node_types", tuple(int(k) for k in self.node_types))
        object.__setattr__(self, "edges", tuple(sorted(canon)))
        object.__setattr__(self, "flags", tuple(self.flags))

    @classmethod
    def untyped(cls, n: int, edges: Iterable[Sequence[int]] = ()) -> "Graph":
        return cls((0,) * n, tuple((e[0], e[1], 0) for e in edges))

    @property
    def num_nodes(self) -> int:
        return len(self.node_types)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v, _ in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v, _ in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def edge_type(self, u: int, v: int) -> int | None:
        if u > v:
            u, v = v, u
        for a, b, t in self.edges:
            if a == u and b == v:
                return t
        return None

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Graph with node ``i`` renamed ``perm[i]``."""
        n = self.num_nodes
        types = [0] * n
        for i, k in enumerate(self.node_types):
            types[perm[i]] = k
        return Graph(tuple(types), tuple((perm[u], perm[v], t) for u, v, t in self.edges))


# ---------------------------------------------------------------------------
# decisions


@dataclass(frozen=True)
class AddNode:
    node_type: int = 0


@dataclass(frozen=True)
class StopNodes:
    pass


@dataclass(frozen=True)
class AddEdge:
    pass


@dataclass(frozen=True)
class StopEdges:
    pass


@dataclass(frozen=True)
class PickNode:
    node: int
    edge_type: int = 0


Decision = Union[AddNode, StopNodes, AddEdge, StopEdges, PickNode]


class GraphBuilder:
    """Partial graph plus the grammar state of the generation loop.

    Phases: ``"node"`` expects AddNode/StopNodes, ``"edge"`` expects
    AddEdge/StopEdges, ``"pick"`` expects PickNode, ``"done"`` is terminal.
    With ``allow_duplicates`` a PickNode naming an existing neighbour is
    accepted as a no-op and counted in ``duplicate_picks``.
    """

    __slots__ = ("node_types", "edge_map", "phase", "allow_duplicates",
                 "duplicate_picks", "edges_this_node", "current_neighbors")

    def __init__(self, allow_duplicates: bool = False):
        self.node_types: list[int] = []
        self.edge_map: dict[tuple[int, int], int] = {}
        self.phase = "node"
        self.allow_duplicates = allow_duplicates
        self.duplicate_picks = 0
        self.edges_this_node = 0
        self.current_neighbors: set[int] = set()

    @property
    def num_nodes(self) -> int:
        return len(self.node_types)

    @property
    def current(self) -> int:
        return len(self.node_types) - 1

    def connected(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edge_map

    def apply(self, d: Decision) -> "GraphBuilder":
        ph = self.phase
        if isinstance(d, AddNode):
            if ph != "node":
                raise GrammarError(f"AddNode not allowed in phase {ph!r}")
            self.node_types.append(int(d.node_type))
            self.phase = "edge"
            self.edges_this_node = 0
            self.current_neighbors = set()
        elif isinstance(d, StopNodes):
            if ph != "node":
                raise GrammarError(f"StopNodes not allowed in phase {ph!r}")
            self.phase = "done"
        elif isinstance(d, AddEdge):
            if ph != "edge":
                raise GrammarError(f"AddEdge not allowed in phase {ph!r}")
            self.phase = "pick"
        elif isinstance(d, StopEdges):
            if ph != "edge":
                raise GrammarError(f"StopEdges not allowed in phase {ph!r}")
            self.phase = "node"
        elif isinstance(d, PickNode):
            if ph != "pick":
                raise GrammarError(f"PickNode not allowed in phase {ph!r}")
            v = self.current
            u = int(d.node)
            if u == v or not 0 <= u < v:
                raise GrammarError(f"PickNode({u}) invalid while building node {v}")
            key = (u, v)
            if key in self.edge_map:
                if not self.allow_duplicates:
                    raise GrammarError(f"duplicate edge ({u}, {v})")
                self.duplicate_picks += 1
            else:
                self.edge_map[key] = int(d.edge_type)
                self.current_neighbors.add(u)
            self.edges_this_node += 1
            self.phase = "edge"
        else:
            raise GrammarError(f"unknown decision {d!r}")
        return self

    def graph(self, flags: Sequence[str] = ()) -> Graph:
        edges = tuple((u, v, t) for (u, v), t in self.edge_map.items())
        return Graph(tuple(self.node_types), edges, tuple(flags))


def apply_decision(state: GraphBuilder, d: Decision) -> GraphBuilder:
    return state.apply(d)


def replay(seq: Iterable[Decision]) -> Graph:
    """Rebuild the graph a complete decision sequence encodes."""
    b = GraphBuilder()
    for d in seq:
        b.apply(d)
    if b.phase != "done":
        raise GrammarError("sequence does not end with StopNodes")
    return b.graph()


# ---------------------------------------------------------------------------
# orderings


@dataclass(frozen=True)
class Ordering:
    """Node generation order plus optional per-node edge orders.

    ``nodes[t]`` is the original id of the node generated at step ``t``.
    ``edges[t]``, when given, lists the original ids of node ``nodes[t]``'s
    earlier neighbours in the order their edges are added; ``None`` means
    ascending generation index.
    """

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, ...], ...] | None = None

    def positions(self) -> list[int]:
        pos = [0] * len(self.nodes)
        for t, x in enumerate(self.nodes):
            pos[x] = t
        return pos


def identity_ordering(g: Graph) -> Ordering:
    return Ordering(tuple(range(g.num_nodes)))


def _validate(g: Graph, ord_: Ordering) -> list[int]:
    n = g.num_nodes
    if sorted(ord_.nodes) != list(range(n)):
        raise OrderingError(f"node order {ord_.nodes} is not a permutation of range({n})")
    pos = ord_.positions()
    if ord_.edges is not None:
        if len(ord_.edges) != n:
            raise OrderingError("edge order needs one entry per node")
        adj = g.neighbors()
        for t, x in enumerate(ord_.nodes):
            earlier = sorted(y for y in adj[x] if pos[y] < t)
            if sorted(ord_.edges[t]) != earlier:
                raise OrderingError(f"edge order for node {x} does not permute its edge batch")
    return pos


def _earlier_neighbors(g: Graph, ord_: Ordering, pos: list[int]) -> list[list[int]]:
    adj = g.neighbors()
    out = []
    for t, x in enumerate(ord_.nodes):
        if ord_.edges is not None:
            out.append(list(ord_.edges[t]))
        else:
            out.append(sorted((y for y in adj[x] if pos[y] < t), key=lambda y: pos[y]))
    return out


def decisions_from_graph(g: Graph, ord_: Ordering | None = None) -> list[Decision]:
    """Serialize ``g`` under an ordering; node ids in the result are generation steps."""
    if ord_ is None:
        ord_ = identity_ordering(g)
    pos = _validate(g, ord_)
    batches = _earlier_neighbors(g, ord_, pos)
    etype = {(u, v): t for u, v, t in g.edges}
    seq: list[Decision] = []
    for t, x in enumerate(ord_.nodes):
        seq.append(AddNode(g.node_types[x]))
        for y in batches[t]:
            seq.append(AddEdge())
            seq.append(PickNode(pos[y], etype[(min(x, y), max(x, y))]))
        seq.append(StopEdges())
    seq.append(StopNodes())
    return seq


def uniform_random_ordering(g: Graph, rng: np.random.Generator) -> Ordering:
    """Uniform node permutation; edges within a batch by node index."""
    return Ordering(tuple(int(i) for i in rng.permutation(g.num_nodes)))


def random_full_ordering(g: Graph, rng: np.random.Generator) -> tuple[Ordering, float]:
    """Uniform node permutation and uniform edge-batch permutations.

    Returns the ordering and its log-probability under this proposal.
    """
    nodes = tuple(int(i) for i in rng.permutation(g.num_nodes))
    base = Ordering(nodes)
    pos = base.positions()
    batches = _earlier_neighbors(g, base, pos)
    logq = -math.lgamma(g.num_nodes + 1)
    edges = []
    for b in batches:
        edges.append(tuple(b[i] for i in rng.permutation(len(b))))
        logq -= math.lgamma(len(b) + 1)
    return Ordering(nodes, tuple(edges)), logq


def enumerate_orderings(g: Graph) -> Iterator[Ordering]:
    """Every (node permutation, edge-batch permutations) pair, each once."""
    adj = g.neighbors()
    for nodes in itertools.permutations(range(g.num_nodes)):
        pos = [0] * len(nodes)
        for t, x in enumerate(nodes):
            pos[x] = t
        batches = [sorted((y for y in adj[x] if pos[y] < t), key=lambda y: pos[y])
                   for t, x in enumerate(nodes)]
        for combo in itertools.product(*(itertools.permutations(b) for b in batches)):
            yield Ordering(nodes, tuple(combo))


def count_orderings(g: Graph) -> int:
    """Number of terms :func:`enumerate_orderings` yields."""
    adj = g.neighbors()
    total = 0
    for nodes in itertools.permutations(range(g.num_nodes)):
        pos = [0] * len(nodes)
        for t, x in enumerate(nodes):
            pos[x] = t
        prod = 1
        for t, x in enumerate(nodes):
            prod *= math.factorial(sum(1 for y in adj[x] if pos[y] < t))
        total += prod
    return total


def _dfs_order(g: Graph) -> list[int]:
    adj = [sorted(a) for a in g.neighbors()]
    seen = [False] * g.num_nodes
    order: list[int] = []
    for root in range(g.num_nodes):
        stack = [root]
        while stack:
            x = stack.pop()
            if seen[x]:
                continue
            seen[x] = True
            order.append(x)
            stack.extend(y for y in reversed(adj[x]) if not seen[y])
    return order


def _bfs_order(g: Graph) -> list[int]:
    adj = [sorted(a) for a in g.neighbors()]
    seen = [False] * g.num_nodes
    order: list[int] = []
    for root in range(g.num_nodes):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            x = queue.popleft()
            order.append(x)
            for y in adj[x]:
                if not seen[y]:
                    seen[y] = True
                    queue.append(y)
    return order


def canonical_ordering(g: Graph, family: str | None = None) -> Ordering:
    """Fixed per-family ordering.

    cycle: walk order (depth-first from node 0); tree: breadth-first from
    node 0; anything else (including BA, whose ids are attachment order):
    identity.
    """
    if family == "cycle":
        return Ordering(tuple(_dfs_order(g)))
    if family == "tree":
        return Ordering(tuple(_bfs_order(g)))
    return identity_ordering(g)


# ---------------------------------------------------------------------------
# synthetic families


def _cycle(n: int) -> Graph:
    return Graph.untyped(n, [(i, (i + 1) % n) for i in range(n)])


def random_tree(n: int, rng: np.random.Generator) -> Graph:
    """Uniform labelled tree on ``n`` nodes from a random Prüfer sequence."""
    if n < 1:
        raise ValueError("tree needs at least one node")
    if n == 1:
        return Graph.untyped(1)
    if n == 2:
        return Graph.untyped(2, [(0, 1)])
    seq = [int(x) for x in rng.integers(0, n, size=n - 2)]
    degree = [1] * n
    for x in seq:
        degree[x] += 1
    leaves = [i for i in range(n) if degree[i] == 1]
    heapq.heapify(leaves)
    edges = []
    for x in seq:
        leaf = heapq.heappop(leaves)
        edges.append((leaf, x))
        degree[x] -= 1
        if degree[x] == 1:
            heapq.heappush(leaves, x)
    u, v = heapq.heappop(leaves), heapq.heappop(leaves)
    edges.append((u, v))
    return Graph.untyped(n, edges)


def _barabasi_albert(n: int, m: int, rng: np.random.Generator) -> Graph:
    # seed: m isolated nodes; node m attaches to all of them
    edges = []
    repeated: list[int] = []
    for new in range(m, n):
        if new == m:
            targets = list(range(m))
        else:
            chosen: set[int] = set()
            while len(chosen) < m:
                chosen.add(repeated[int(rng.integers(len(repeated)))])
            targets = sorted(chosen)
        for u in targets:
            edges.append((u, new))
            repeated.extend((u, new))
    return Graph.untyped(n, edges)


def graph_with_cycle_rank(n: int, rank: int, rng: np.random.Generator) -> Graph:
    """Connected graph on ``n`` nodes: a uniform random tree plus ``rank`` chords."""
    tree = random_tree(n, rng)
    have = {(u, v) for u, v, _ in tree.edges}
    free = [(u, v) for u in range(n) for v in range(u + 1, n) if (u, v) not in have]
    if rank > len(free):
        raise ValueError(f"cannot place {rank} extra edges on {n} nodes")
    pick = rng.choice(len(free), size=rank, replace=False) if rank else []
    return Graph.untyped(n, sorted(have) + [free[i] for i in pick])


def gen_synthetic(family: str, rng: np.random.Generator, *, n: int | None = None,
                  n_min: int = 10, n_max: int = 20, m: int = 2,
                  rank: int | None = None) -> Graph:
    """Draw one graph from a synthetic family.

    ``cycle`` and ``tree`` draw ``n`` uniformly from ``[n_min, n_max]`` unless
    given; ``ba`` defaults to ``n=15`` with ``m=2``; ``rank`` is a tree plus
    ``rank`` chords (cycle rank ``rank``).
    """
    if family in ("ba", "barabasi_albert"):
        n = 15 if n is None else n
        if m < 1 or n <= m:
            raise ValueError(f"BA needs 1 <= m < n, got m={m}, n={n}")
        return _barabasi_albert(n, m, rng)
    if n is None:
        if n_min > n_max:
            raise ValueError(f"n_min={n_min} exceeds n_max={n_max}")
        n = int(rng.integers(n_min, n_max + 1))
    if family == "cycle":
        if n < 3:
            raise ValueError(f"cycle needs n >= 3, got {n}")
        return _cycle(n)
    if family == "tree":
        if n < 1:
            raise ValueError(f"tree needs n >= 1, got {n}")
        return random_tree(n, rng)
    if family == "rank":
        if rank is None:
            raise ValueError("family 'rank' needs a rank")
        return graph_with_cycle_rank(n, rank, rng)
    raise ValueError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# JSONL


def graph_to_json(g: Graph) -> str:
    obj: dict = {"node_types": list(g.node_types), "edges": [list(e) for e in g.edges]}
    if g.flags:
        obj["flags"] = list(g.flags)
    return json.dumps(obj, separators=(",", ":"))


def graph_from_json(line: str) -> Graph:
    obj = json.loads(line)
    return Graph(tuple(obj["node_types"]), tuple(tuple(e) for e in obj["edges"]),
                 tuple(obj.get("flags", ())))


def write_jsonl(graphs: Iterable[Graph], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(graph_to_json(g))
            fh.write("\n")


def read_jsonl(path) -> list[Graph]:
    with open(path, encoding="utf-8") as fh:
        return [graph_from_json(line) for line in fh if line.strip()]
