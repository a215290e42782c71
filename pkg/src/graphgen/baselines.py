"""Erdős–Rényi baseline and an LSTM over flattened decision sequences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .generator import GenerationTrace, Limits, Sample, TraceStep
from .graphcore import (AddEdge, AddNode, Decision, Graph, GrammarError, GraphBuilder,
                        PickNode, StopEdges, StopNodes)
from .heads import ConditionStats, Dropout
from .propnet import uniform_init
from .tensor import Tensor

__all__ = [
    "ERModel",
    "er_fit",
    "er_sample",
    "er_samples",
    "er_logprob",
    "SeqConfig",
    "SeqModel",
    "Vocabulary",
    "seq_logprob",
    "seq_sample",
    "seq_samples",
]

MASK_VALUE = -1e30


# ---------------------------------------------------------------------------
# Erdős–Rényi


@dataclass
class ERModel:
    p: float
    node_counts: dict[int, float]

    kind = "er"

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"edge probability {self.p} outside [0, 1]")
        total = sum(self.node_counts.values())
        if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("node-count distribution must sum to 1")

    def to_dict(self) -> dict:
        return {"p": self.p, "node_counts": {str(k): v for k, v in self.node_counts.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ERModel":
        return cls(float(d["p"]), {int(k): float(v) for k, v in d["node_counts"].items()})


def er_fit(graphs: Sequence[Graph]) -> ERModel:
    """Maximum-likelihood edge probability plus the empirical node-count law."""
    if not graphs:
        raise ValueError("er_fit needs at least one graph")
    edges = sum(g.num_edges for g in graphs)
    pairs = sum(g.num_nodes * (g.num_nodes - 1) // 2 for g in graphs)
    p = edges / pairs if pairs else 0.0
    counts = Counter(g.num_nodes for g in graphs)
    total = len(graphs)
    return ERModel(p, {n: c / total for n, c in sorted(counts.items())})


def er_sample(model: ERModel, rng: np.random.Generator) -> Graph:
    sizes = np.array(list(model.node_counts))
    n = int(rng.choice(sizes, p=np.array(list(model.node_counts.values()))))
    iu, iv = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < model.p
    return Graph.untyped(n, zip(iu[keep].tolist(), iv[keep].tolist()))


def er_samples(model: ERModel, count: int, rng: np.random.Generator) -> list[Graph]:
    return [er_sample(model, rng) for _ in range(count)]


def _xlogy(x: float, y: float) -> float:
    if x == 0:
        return 0.0
    return -math.inf if y == 0 else x * math.log(y)


def er_logprob(model: ERModel, g: Graph, include_size: bool = True) -> float:
    """``log P(n) + sum over pairs of log p or log(1 - p)``; ``-inf`` if impossible.

    ``include_size=False`` drops ``log P(n)``, giving the edge term given ``n``.
    """
    size_term = 0.0
    if include_size:
        pn = model.node_counts.get(g.num_nodes, 0.0)
        if pn == 0.0:
            return -math.inf
        size_term = math.log(pn)
    n, m = g.num_nodes, g.num_edges
    pairs = n * (n - 1) // 2
    return size_term + _xlogy(m, model.p) + _xlogy(pairs - m, 1.0 - model.p)


# ---------------------------------------------------------------------------
# LSTM over decision tokens


class Vocabulary:
    """Token ids: AddNode(k) for each type, StopNodes, AddEdge, StopEdges, PickNode(u, j).

    PickNode tokens cover ``u < max_nodes`` and every edge type.
    """

    def __init__(self, node_types: int = 1, edge_types: int = 1, max_nodes: int = 25):
        self.K, self.J, self.max_nodes = node_types, edge_types, max_nodes
        self.stop_nodes = self.K
        self.add_edge = self.K + 1
        self.stop_edges = self.K + 2
        self.pick0 = self.K + 3
        self.size = self.pick0 + max_nodes * edge_types

    def encode(self, d: Decision) -> int:
        if isinstance(d, AddNode):
            if not 0 <= d.node_type < self.K:
                raise GrammarError(f"node type {d.node_type} outside vocabulary")
            return d.node_type
        if isinstance(d, StopNodes):
            return self.stop_nodes
        if isinstance(d, AddEdge):
            return self.add_edge
        if isinstance(d, StopEdges):
            return self.stop_edges
        if isinstance(d, PickNode):
            if not 0 <= d.node < self.max_nodes or not 0 <= d.edge_type < self.J:
                raise GrammarError(f"{d!r} outside the vocabulary (max_nodes={self.max_nodes})")
            return self.pick0 + d.node * self.J + d.edge_type
        raise GrammarError(f"unknown decision {d!r}")

    def decode(self, tok: int) -> Decision:
        if tok < self.K:
            return AddNode(tok)
        if tok == self.stop_nodes:
            return StopNodes()
        if tok == self.add_edge:
            return AddEdge()
        if tok == self.stop_edges:
            return StopEdges()
        u, j = divmod(tok - self.pick0, self.J)
        return PickNode(u, j)

    def legal(self, b: GraphBuilder) -> np.ndarray:
        """Boolean mask of grammar-legal next tokens."""
        m = np.zeros(self.size, dtype=bool)
        if b.phase == "node":
            m[:self.K + 1] = True
        elif b.phase == "edge":
            m[self.stop_edges] = True
            m[self.add_edge] = b.current > 0
        elif b.phase == "pick":
            m[self.pick0:self.pick0 + min(b.current, self.max_nodes) * self.J] = True
        return m


@dataclass
class SeqConfig:
    hidden: int = 64
    embed: int = 64
    node_types: int = 1
    edge_types: int = 1
    max_nodes: int = 25
    cond_dim: int = 0
    cond_inputs: int = 3
    masked: bool = True

    @property
    def conditional(self) -> bool:
        return self.cond_dim > 0

    def to_dict(self) -> dict:
        return asdict(self)


class SeqModel(ConditionStats):
    """Single-layer LSTM language model over decision tokens.

    With ``masked`` set, illegal tokens get an additive ``-1e30`` before the
    softmax, so probability mass is renormalized over the legal ones.
    """

    kind = "lstm"

    def __init__(self, config: SeqConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config
        self.vocab = Vocabulary(config.node_types, config.edge_types, config.max_nodes)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
                       for k, v in params.items()}
        self.cond_mean = np.zeros(config.cond_inputs)
        self.cond_std = np.ones(config.cond_inputs)

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c, W = self.config, self.vocab.size
        H, E = c.hidden, c.embed
        p = {
            "embed": rng.uniform(-1.0, 1.0, size=(W + 1, E)),  # last row: start token
            "lstm.W": uniform_init(rng, E + H, (E + H, 4 * H)),
            "lstm.b": np.zeros(4 * H),
            "out.W": uniform_init(rng, H, (H, W)),
            "out.b": np.zeros(W),
        }
        if c.conditional:
            p["cond.W"] = uniform_init(rng, c.cond_inputs, (c.cond_inputs, c.cond_dim))
            p["cond.b"] = np.zeros(c.cond_dim)
            p["h0.W"] = uniform_init(rng, c.cond_dim, (c.cond_dim, H))
            p["c0.W"] = uniform_init(rng, c.cond_dim, (c.cond_dim, H))
        return p

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def copy(self) -> "SeqModel":
        other = SeqModel(self.config, {k: v.copy() for k, v in self.arrays().items()})
        other.cond_mean = self.cond_mean.copy()
        other.cond_std = self.cond_std.copy()
        return other

    def zero_(self) -> "SeqModel":
        for t in self.params.values():
            t.data[...] = 0.0
        return self

    # -- recurrence ---------------------------------------------------------

    def _initial(self, B: int, conds) -> tuple[Tensor, Tensor]:
        H = self.config.hidden
        if self.config.conditional:
            if conds is None:
                raise ValueError("conditional model needs conditions")
            P = self.params
            cn = self.normalize_condition(np.atleast_2d(conds))
            f = tn.tanh(tn.linear(Tensor(cn), P["cond.W"], P["cond.b"]))
            return f @ P["h0.W"], f @ P["c0.W"]
        if conds is not None:
            raise ValueError("conditions given to an unconditional model")
        return Tensor(np.zeros((B, H))), Tensor(np.zeros((B, H)))

    def _cell(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        H = self.config.hidden
        P = self.params
        z = tn.linear(tn.concat([x, h], axis=1), P["lstm.W"], P["lstm.b"])
        i = tn.sigmoid(tn.columns(z, 0, H))
        f = tn.sigmoid(tn.columns(z, H, 2 * H))
        o = tn.sigmoid(tn.columns(z, 2 * H, 3 * H))
        g = tn.tanh(tn.columns(z, 3 * H, 4 * H))
        c = f * c + i * g
        return o * tn.tanh(c), c

    def _masks(self, toks: Sequence[Sequence[int]]) -> list[np.ndarray]:
        out = []
        for seq in toks:
            b = GraphBuilder(allow_duplicates=True)
            rows = []
            for t in seq:
                rows.append(self.vocab.legal(b))
                if not rows[-1][t] and self.config.masked:
                    raise GrammarError(f"token {self.vocab.decode(t)!r} illegal at this point")
                b.apply(self.vocab.decode(t))
            out.append(np.array(rows).reshape(len(seq), self.vocab.size))
        return out

    def batch_logprobs(self, seqs: Sequence[Sequence[Decision]], conds=None,
                       dropout: Dropout | None = None) -> Tensor:
        """Per-sequence log-probabilities, recorded on the active tape."""
        toks = [[self.vocab.encode(d) for d in s] for s in seqs]
        B = len(toks)
        L = max((len(t) for t in toks), default=0)
        lengths = np.array([len(t) for t in toks])
        W = self.vocab.size
        pad = np.full((B, L), W, dtype=np.intp)
        for i, t in enumerate(toks):
            pad[i, :len(t)] = t
        h, c = self._initial(B, conds)
        P = self.params
        hs = []
        prev = np.full(B, W, dtype=np.intp)  # start token
        for t in range(L):
            h, c = self._cell(tn.gather(P["embed"], prev), h, c)
            hs.append(h)
            prev = pad[:, t]
        if L == 0:
            return Tensor(np.zeros(B))
        # rows ordered time-major: row t * B + b
        hall = tn.concat(hs, axis=0)
        if dropout is not None:
            hall = dropout(hall)
        logits = tn.linear(hall, P["out.W"], P["out.b"])
        if self.config.masked:
            masks = self._masks(toks)
            add = np.zeros((L * B, W))
            for b, m in enumerate(masks):
                add[np.arange(len(m)) * B + b] = np.where(m, 0.0, MASK_VALUE)
            logits = logits + add
        lsm = tn.log_softmax(logits)
        valid = np.arange(L)[:, None] < lengths[None, :]
        rows = np.nonzero(valid.reshape(-1))[0]
        chosen = pad.T.reshape(-1)[rows]
        picked = tn.take(lsm, (rows, chosen))
        return tn.segment_sum(picked, rows % B, B)

    def step_logprobs(self, seq: Sequence[Decision], cond=None) -> list[float]:
        with tn.no_tape():
            toks = [self.vocab.encode(d) for d in seq]
            h, c = self._initial(1, None if cond is None else [cond])
            P = self.params
            prev = self.vocab.size
            b = GraphBuilder(allow_duplicates=True)
            out = []
            for t in toks:
                h, c = self._cell(tn.gather(P["embed"], [prev]), h, c)
                logits = (h @ P["out.W"] + P["out.b"]).data[0]
                if self.config.masked:
                    logits = np.where(self.vocab.legal(b), logits, MASK_VALUE)
                lsm = logits - np.logaddexp.reduce(logits)
                out.append(float(lsm[t]))
                b.apply(self.vocab.decode(t))
                prev = t
        return out


def seq_logprob(model: SeqModel, seq: Sequence[Decision], cond=None) -> tuple[float, list[float]]:
    with tn.no_tape():
        lp = model.batch_logprobs([seq], None if cond is None else [cond])
    return float(lp.data[0]), model.step_logprobs(seq, cond)


def seq_samples(model: SeqModel, count: int, rng: np.random.Generator,
                limits: Limits | None = None, conds=None,
                batch_size: int = 500) -> list[Sample]:
    """Ancestral sampling of token sequences, ``batch_size`` at a time.

    Unmasked models may emit an illegal token; the sample then stops and is
    flagged ``grammar_error``.
    """
    limits = limits or Limits()
    out: list[Sample] = []
    with tn.no_tape():
        for start in range(0, count, batch_size):
            n = min(batch_size, count - start)
            c = None if conds is None else np.asarray(conds)[start:start + n]
            out.extend(_sample_batch(model, n, rng, limits, c))
    return out


def _sample_batch(model: SeqModel, B: int, rng, limits: Limits, conds) -> list[Sample]:
    V = model.vocab
    P = model.params
    h, c = model._initial(B, conds)
    builders = [GraphBuilder(allow_duplicates=True) for _ in range(B)]
    steps: list[list[TraceStep]] = [[] for _ in range(B)]
    flags: list[list[str]] = [[] for _ in range(B)]
    active = np.ones(B, dtype=bool)
    prev = np.full(B, V.size, dtype=np.intp)
    while active.any():
        idx = np.nonzero(active)[0]
        hh, cc = model._cell(tn.gather(P["embed"], prev[idx]), tn.gather(h, idx), tn.gather(c, idx))
        h.data[idx] = hh.data
        c.data[idx] = cc.data
        logits = (hh @ P["out.W"] + P["out.b"]).data
        legal = np.array([V.legal(builders[b]) for b in idx])
        if model.config.masked:
            logits = np.where(legal, logits, MASK_VALUE)
        logp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
        p = np.exp(logp)
        cum = np.cumsum(p, axis=1)
        r = rng.random(len(idx)) * cum[:, -1]
        tok = np.minimum((cum < r[:, None]).sum(axis=1), V.size - 1)
        for i, b in enumerate(idx):
            t = int(tok[i])
            bl = builders[b]
            if not legal[i, t]:
                flags[b].append("grammar_error")
                active[b] = False
                continue
            d = V.decode(t)
            if isinstance(d, AddNode) and bl.num_nodes >= limits.max_nodes:
                flags[b].append("truncated")
                active[b] = False
                continue
            if isinstance(d, AddEdge):
                cap = limits.max_edges_per_node
                cap = bl.num_nodes - 1 if cap is None else cap
                if bl.edges_this_node >= cap:
                    # same rule as the graph model: end the edge loop instead
                    if "truncated" not in flags[b]:
                        flags[b].append("truncated")
                    t = V.stop_edges
                    d = StopEdges()
            bl.apply(d)
            steps[b].append(TraceStep(d, float(p[i, t])))
            prev[b] = t
            if isinstance(d, StopNodes):
                active[b] = False
    out = []
    for b in range(B):
        f = list(flags[b])
        if builders[b].duplicate_picks:
            f.append("duplicate_edge")
        out.append(Sample(builders[b].graph(f), GenerationTrace(steps[b]),
                          "truncated" in f or "grammar_error" in f,
                          builders[b].duplicate_picks))
    return out


def seq_sample(model: SeqModel, rng: np.random.Generator, limits: Limits | None = None,
               cond=None) -> tuple[Graph, GenerationTrace]:
    s = seq_samples(model, 1, rng, limits, None if cond is None else [cond])[0]
    return s.graph, s.trace
