"""Ancestral sampling, teacher-forced scoring, bias shifting and trace export.

Scoring and sampling share one batch runner.  Every macro step groups the
still-active graphs by the head they need next (add-node, add-edge or
pick-node), evaluates that head once on the disjoint union of those graphs,
writes the propagated states back (states are carried over after every
decision), and then applies the chosen decisions.  A new node's state is
initialized right after its AddNode decision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .graphcore import (AddEdge, AddNode, Decision, Graph, GrammarError, GraphBuilder,
                        PickNode, StopEdges, StopNodes, graph_to_json)
from .heads import (Dropout, GraphModel, addedge_logits, addnode_logits,
                    condition_features, init_node_states, node_scores)
from .tensor import Tensor

__all__ = [
    "Limits",
    "TraceStep",
    "GenerationTrace",
    "Sample",
    "run_batch",
    "sequence_logprob",
    "sequence_logprobs",
    "sample_graph",
    "sample_graphs",
    "shift_bias",
    "export_trace",
    "decision_to_dict",
]

_HEAD_OF_PHASE = {"node": "addnode", "edge": "addedge", "pick": "nodes"}


@dataclass
class Limits:
    """Sampling caps; ``max_edges_per_node=None`` means (nodes so far - 1)."""

    max_nodes: int = 25
    max_edges_per_node: int | None = None

    def __post_init__(self):
        if self.max_nodes <= 0:
            raise ValueError("max_nodes must be positive")
        if self.max_edges_per_node is not None and self.max_edges_per_node <= 0:
            raise ValueError("max_edges_per_node must be positive")


@dataclass
class TraceStep:
    decision: Decision
    prob: float


@dataclass
class GenerationTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def decisions(self) -> list[Decision]:
        return [s.decision for s in self.steps]

    def log_prob(self) -> float:
        return float(sum(math.log(s.prob) for s in self.steps))

    def snapshots(self) -> list[Graph]:
        """Partial graph after each step."""
        b = GraphBuilder(allow_duplicates=True)
        out = []
        for s in self.steps:
            b.apply(s.decision)
            out.append(b.graph())
        return out


@dataclass
class Sample:
    graph: Graph
    trace: GenerationTrace
    truncated: bool = False
    duplicate_picks: int = 0


class _Episode:
    __slots__ = ("builder", "rows", "seq", "pos", "done", "truncated", "steps", "cond")

    def __init__(self, seq: Sequence[Decision] | None):
        self.builder = GraphBuilder(allow_duplicates=True)
        self.rows: list[int] = []
        self.seq = seq
        self.pos = 0
        self.done = False
        self.truncated = False
        self.steps: list[tuple[Decision, float]] = []

    def next_decision(self) -> Decision:
        if self.pos >= len(self.seq):
            raise GrammarError("decision sequence ended before StopNodes")
        return self.seq[self.pos]


def _categorical(p: np.ndarray, seg: np.ndarray, num: int, rng: np.random.Generator) -> np.ndarray:
    """One draw per segment from flat probabilities ``p``; returns flat indices."""
    order = np.argsort(seg, kind="stable")
    counts = np.bincount(seg, minlength=num)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    cum = np.cumsum(p[order])
    base = np.where(starts > 0, cum[starts - 1], 0.0)
    total = cum[starts + counts - 1] - base
    target = base + rng.random(num) * total
    idx = np.searchsorted(cum, target, side="right")
    idx = np.clip(idx, starts, starts + counts - 1)
    return order[idx]


def run_batch(model: GraphModel, seqs: Sequence[Sequence[Decision]] | None = None, *,
              count: int | None = None, conds: np.ndarray | None = None,
              rng: np.random.Generator | None = None, limits: Limits | None = None,
              dropout: Dropout | None = None, partial: bool = False):
    """Score ``seqs`` (teacher forcing) or sample ``count`` graphs.

    ``conds`` holds raw condition rows, one per graph.  Returns
    ``(episodes, per_graph_logp)`` where ``per_graph_logp`` is a tensor
    (recorded on the active tape when scoring) or ``None`` when sampling.
    """
    cfg = model.config
    P = model.params
    scoring = seqs is not None
    if scoring:
        episodes = [_Episode(s) for s in seqs]
    else:
        if rng is None:
            raise ValueError("sampling needs an rng")
        episodes = [_Episode(None) for _ in range(count)]
    limits = limits or Limits()
    B = len(episodes)
    H, J, K = cfg.hidden, cfg.edge_types, cfg.node_types
    typed = cfg.typed_nodes
    drop = dropout if dropout is not None else (lambda x: x)

    cond_feat = None
    if conds is not None:
        if not cfg.conditional:
            raise ValueError("conditions given to an unconditional model")
        cond_feat = condition_features(model, model.normalize_condition(np.atleast_2d(conds)))
    elif cfg.conditional:
        raise ValueError("conditional model needs conditions")

    h = Tensor(np.zeros((0, H)))
    row_graph = np.zeros(0, dtype=np.intp)
    row_local = np.zeros(0, dtype=np.intp)
    edge_u: list[int] = []
    edge_v: list[int] = []
    edge_t: list[int] = []
    edge_g: list[int] = []
    lp_parts: list[Tensor] = []
    lp_owner: list[np.ndarray] = []

    while True:
        groups: dict[str, list[int]] = {"addnode": [], "addedge": [], "nodes": []}
        for b, ep in enumerate(episodes):
            if ep.done:
                continue
            if scoring and partial and ep.pos >= len(ep.seq):
                ep.done = True
                continue
            groups[_HEAD_OF_PHASE[ep.builder.phase]].append(b)
        if not any(groups.values()):
            break

        N = h.shape[0]
        eu_g = np.asarray(edge_u, dtype=np.intp)
        ev_g = np.asarray(edge_v, dtype=np.intp)
        et_g = np.asarray(edge_t, dtype=np.intp)
        eg_g = np.asarray(edge_g, dtype=np.intp)
        updates: list[tuple[np.ndarray, Tensor]] = []
        actions: list[tuple[int, Decision, float]] = []

        for head, members in groups.items():
            if not members:
                continue
            gids = np.asarray(members, dtype=np.intp)
            G = len(gids)
            compact = np.full(B, -1, dtype=np.intp)
            compact[gids] = np.arange(G)
            rows = np.nonzero(compact[row_graph] >= 0)[0]
            loc = np.full(N, -1, dtype=np.intp)
            loc[rows] = np.arange(len(rows))
            seg = compact[row_graph[rows]]
            emask = compact[eg_g] >= 0 if len(eg_g) else np.zeros(0, dtype=bool)
            eu, ev, et = loc[eu_g[emask]], loc[ev_g[emask]], et_g[emask]
            h_sub = tn.gather(h, rows)

            if head == "addnode":
                hT, logits = addnode_logits(model, h_sub, eu, ev, et, seg, G, drop)
                if typed:
                    logp_all = tn.log_softmax(logits)
                    if scoring:
                        choice = np.empty(G, dtype=np.intp)
                        for i, b in enumerate(gids):
                            d = episodes[b].next_decision()
                            if isinstance(d, AddNode):
                                if not 0 <= d.node_type < K:
                                    raise GrammarError(f"node type {d.node_type} outside [0, {K})")
                                choice[i] = d.node_type
                            elif isinstance(d, StopNodes):
                                choice[i] = K
                            else:
                                raise GrammarError(f"{d!r} where AddNode/StopNodes expected")
                    else:
                        p = np.exp(logp_all.data)
                        choice = _categorical(p.reshape(-1), np.repeat(np.arange(G), K + 1),
                                              G, rng) - np.arange(G) * (K + 1)
                    lp = tn.take(logp_all, (np.arange(G), choice))
                    decs = [AddNode(int(c)) if c < K else StopNodes() for c in choice]
                else:
                    x = tn.reshape(logits, (-1,))
                    if scoring:
                        decs = [episodes[b].next_decision() for b in gids]
                        for d in decs:
                            if not isinstance(d, (AddNode, StopNodes)):
                                raise GrammarError(f"{d!r} where AddNode/StopNodes expected")
                        sign = np.array([1.0 if isinstance(d, AddNode) else -1.0 for d in decs])
                    else:
                        padd = 1.0 / (1.0 + np.exp(-x.data))
                        add = rng.random(G) < padd
                        sign = np.where(add, 1.0, -1.0)
                        decs = [AddNode(0) if a else StopNodes() for a in add]
                    lp = tn.log_sigmoid(x * sign)
                for i, b in enumerate(gids):
                    d = decs[i]
                    ep = episodes[b]
                    if (not scoring and isinstance(d, AddNode)
                            and ep.builder.num_nodes >= limits.max_nodes):
                        ep.truncated = True
                        ep.done = True
                        continue
                    actions.append((b, d, float(lp.data[i])))

            elif head == "addedge":
                new_rows = loc[[episodes[b].rows[-1] for b in gids]]
                hT, logit = addedge_logits(model, h_sub, eu, ev, et, seg, G, new_rows, drop)
                x = tn.reshape(logit, (-1,))
                ncand = np.array([_num_candidates(episodes[b].builder, cfg.mask_connected)
                                  for b in gids])
                if scoring:
                    decs = [episodes[b].next_decision() for b in gids]
                    for d, nc in zip(decs, ncand):
                        if isinstance(d, AddEdge):
                            if nc == 0:
                                raise GrammarError("AddEdge with no node left to connect to")
                        elif not isinstance(d, StopEdges):
                            raise GrammarError(f"{d!r} where AddEdge/StopEdges expected")
                    sign = np.array([1.0 if isinstance(d, AddEdge) else -1.0 for d in decs])
                else:
                    padd = 1.0 / (1.0 + np.exp(-x.data))
                    drawn = (rng.random(G) < padd) & (ncand > 0)
                    cap = limits.max_edges_per_node
                    blocked = np.array([
                        episodes[b].builder.edges_this_node
                        >= (episodes[b].builder.num_nodes - 1 if cap is None else cap)
                        for b in gids])
                    # a capped AddEdge becomes StopEdges and flags the sample
                    for b in gids[drawn & blocked]:
                        episodes[b].truncated = True
                    add = drawn & ~blocked
                    sign = np.where(add, 1.0, -1.0)
                    decs = [AddEdge() if a else StopEdges() for a in add]
                lp = tn.log_sigmoid(x * sign)
                for i, b in enumerate(gids):
                    actions.append((b, decs[i], float(lp.data[i])))

            else:  # nodes
                new_loc = loc[[episodes[b].rows[-1] for b in gids]]
                cmask = np.ones(len(rows), dtype=bool)
                cmask[new_loc] = False
                if cfg.mask_connected and len(eu):
                    is_new = np.zeros(len(rows), dtype=bool)
                    is_new[new_loc] = True
                    cmask[eu[is_new[ev]]] = False
                cand = np.nonzero(cmask)[0]
                cand_graph = seg[cand]
                counts = np.bincount(cand_graph, minlength=G)
                if np.any(counts == 0):
                    raise GrammarError("PickNode with no candidate node")
                hT, s = node_scores(model, h_sub, eu, ev, et, new_loc, cand, cand_graph, drop)
                flat_seg = np.repeat(cand_graph, J)
                lsm = tn.segment_log_softmax(s, flat_seg, G)
                if scoring:
                    cpos = np.full(len(rows), -1, dtype=np.intp)
                    cpos[cand] = np.arange(len(cand))
                    flat = np.empty(G, dtype=np.intp)
                    decs = []
                    for i, b in enumerate(gids):
                        ep = episodes[b]
                        d = ep.next_decision()
                        if not isinstance(d, PickNode):
                            raise GrammarError(f"{d!r} where PickNode expected")
                        u = int(d.node)
                        if not 0 <= u < ep.builder.current or not 0 <= d.edge_type < J:
                            raise GrammarError(f"{d!r} invalid for node {ep.builder.current}")
                        c = cpos[loc[ep.rows[u]]]
                        if c < 0:
                            raise GrammarError(f"{d!r} names a masked candidate")
                        flat[i] = c * J + d.edge_type
                        decs.append(d)
                else:
                    flat = _categorical(np.exp(lsm.data), flat_seg, G, rng)
                    decs = []
                    for i, b in enumerate(gids):
                        r = rows[cand[flat[i] // J]]
                        decs.append(PickNode(int(row_local[r]), int(flat[i] % J)))
                lp = tn.gather(lsm, flat)
                for i, b in enumerate(gids):
                    actions.append((b, decs[i], float(lp.data[i])))

            updates.append((rows, hT))
            lp_parts.append(lp)
            lp_owner.append(gids)

        # carry propagated states over
        all_rows = np.concatenate([r for r, _ in updates])
        if len(all_rows):
            idx = np.arange(N)
            idx[all_rows] = N + np.arange(len(all_rows))
            h = tn.gather(tn.concat([h] + [t for _, t in updates], axis=0), idx)

        new_nodes: list[tuple[int, int]] = []
        for b, d, logp in actions:
            ep = episodes[b]
            dups = ep.builder.duplicate_picks
            ep.builder.apply(d)
            ep.steps.append((d, logp))
            if scoring:
                ep.pos += 1
            if isinstance(d, AddNode):
                new_nodes.append((b, d.node_type))
            elif isinstance(d, PickNode) and ep.builder.duplicate_picks == dups:
                edge_u.append(ep.rows[d.node])
                edge_v.append(ep.rows[ep.builder.current])
                edge_t.append(int(d.edge_type))
                edge_g.append(b)
            elif isinstance(d, StopNodes):
                ep.done = True

        if new_nodes:
            gids = np.array([b for b, _ in new_nodes], dtype=np.intp)
            types = np.array([k for _, k in new_nodes], dtype=np.intp)
            G = len(gids)
            N = h.shape[0]
            compact = np.full(B, -1, dtype=np.intp)
            compact[gids] = np.arange(G)
            rows = np.nonzero(compact[row_graph] >= 0)[0]
            cf = tn.gather(cond_feat, gids) if cond_feat is not None else None
            init = init_node_states(model, tn.gather(h, rows), compact[row_graph[rows]], G,
                                    types, cf)
            h = tn.concat([h, init], axis=0)
            row_graph = np.concatenate([row_graph, gids])
            row_local = np.concatenate(
                [row_local, [episodes[b].builder.num_nodes - 1 for b in gids]]).astype(np.intp)
            for i, b in enumerate(gids):
                episodes[b].rows.append(N + i)

    per_graph = None
    if scoring:
        if lp_parts:
            per_graph = tn.segment_sum(tn.concat(lp_parts, axis=0),
                                       np.concatenate(lp_owner), B)
        else:
            per_graph = Tensor(np.zeros(B))
        for ep in episodes:
            if not partial and ep.builder.phase != "done":
                raise GrammarError("decision sequence ended before StopNodes")
            if ep.pos != len(ep.seq):
                raise GrammarError("decisions left over after StopNodes")
    return episodes, per_graph


def _num_candidates(b: GraphBuilder, mask_connected: bool) -> int:
    n = b.num_nodes - 1
    if mask_connected:
        n -= len(b.current_neighbors)
    return n


# ---------------------------------------------------------------------------
# public API


def sequence_logprobs(model: GraphModel, seqs: Sequence[Sequence[Decision]],
                      conds: np.ndarray | None = None, dropout: Dropout | None = None,
                      partial: bool = False) -> tuple[Tensor, list[list[float]]]:
    """Teacher-forced ``log p(G, pi)`` per sequence plus per-step terms.

    The returned tensor is recorded on the active tape, so it can be used as
    a training objective.
    """
    episodes, per_graph = run_batch(model, seqs, conds=conds, dropout=dropout,
                                    partial=partial)
    return per_graph, [[lp for _, lp in ep.steps] for ep in episodes]


def sequence_logprob(model: GraphModel, seq: Sequence[Decision], cond=None,
                     partial: bool = False) -> tuple[float, list[float]]:
    with tn.no_tape():
        lp, steps = sequence_logprobs(model, [seq], None if cond is None else [cond],
                                      partial=partial)
    return float(lp.data[0]), steps[0]


def _to_sample(ep: _Episode) -> Sample:
    trace = GenerationTrace([TraceStep(d, math.exp(lp)) for d, lp in ep.steps])
    flags = []
    if ep.truncated:
        flags.append("truncated")
    if ep.builder.duplicate_picks:
        flags.append("duplicate_edge")
    return Sample(ep.builder.graph(flags), trace, ep.truncated, ep.builder.duplicate_picks)


def sample_graphs(model: GraphModel, count: int, rng: np.random.Generator,
                  limits: Limits | None = None, conds: np.ndarray | None = None,
                  batch_size: int = 500) -> list[Sample]:
    """Draw ``count`` graphs, ``batch_size`` at a time in lockstep."""
    out: list[Sample] = []
    with tn.no_tape():
        for start in range(0, count, batch_size):
            n = min(batch_size, count - start)
            c = None if conds is None else np.asarray(conds)[start:start + n]
            episodes, _ = run_batch(model, count=n, conds=c, rng=rng, limits=limits)
            out.extend(_to_sample(ep) for ep in episodes)
    return out


def sample_graph(model: GraphModel, limits: Limits | None = None, cond=None,
                 rng: np.random.Generator | None = None) -> tuple[Graph, GenerationTrace]:
    rng = rng if rng is not None else np.random.default_rng()
    s = sample_graphs(model, 1, rng, limits, None if cond is None else [cond])[0]
    return s.graph, s.trace


def shift_bias(model: GraphModel, head: str, delta: float) -> GraphModel:
    """Copy of ``model`` with ``delta`` added to the add-node or add-edge logits.

    For typed nodes every non-stop logit moves; the stop logit is untouched.
    """
    out = model.copy()
    if head == "addnode":
        b = out.params["addnode.out.b"].data
        if model.config.typed_nodes:
            b[:-1] += delta
        else:
            b += delta
    elif head == "addedge":
        out.params["addedge.out.b"].data[...] += delta
    else:
        raise ValueError(f"head must be 'addnode' or 'addedge', got {head!r}")
    return out


# ---------------------------------------------------------------------------
# trace export


def decision_to_dict(d: Decision) -> dict:
    if isinstance(d, AddNode):
        return {"kind": "add_node", "node_type": d.node_type}
    if isinstance(d, StopNodes):
        return {"kind": "stop_nodes"}
    if isinstance(d, AddEdge):
        return {"kind": "add_edge"}
    if isinstance(d, StopEdges):
        return {"kind": "stop_edges"}
    return {"kind": "pick_node", "node": d.node, "edge_type": d.edge_type}


def _label(d: Decision) -> str:
    dd = decision_to_dict(d)
    extra = ", ".join(f"{k}={v}" for k, v in dd.items() if k != "kind")
    return f"{dd['kind']}({extra})"


def export_trace(trace: GenerationTrace, fmt: str = "dot") -> str:
    """One DOT graph (or one JSON object per line) for every step."""
    if fmt not in ("dot", "json"):
        raise ValueError(f"unknown trace format {fmt!r}")
    parts = []
    for i, (step, g) in enumerate(zip(trace.steps, trace.snapshots())):
        if fmt == "json":
            parts.append(json.dumps({
                "step": i,
                "decision": decision_to_dict(step.decision),
                "prob": step.prob,
                "graph": json.loads(graph_to_json(g)),
            }, separators=(",", ":")))
            continue
        lines = [f"graph step_{i} {{",
                 f'  label="step {i}: {_label(step.decision)} p={step.prob:.6g}";']
        for v, k in enumerate(g.node_types):
            lines.append(f'  n{v} [label="{v}:{k}"];')
        for u, v, t in g.edges:
            lines.append(f'  n{u} -- n{v} [label="{t}"];')
        lines.append("}")
        parts.append("\n".join(lines))
    return "\n".join(parts) + ("\n" if parts else "")
