"""Decision heads (add-node, add-edge, pick-node) and node-state initialization.

Each head owns its own propagation parameters.  The batched functions here
operate on a union of graphs (see :mod:`graphgen.propnet`); the ``f_*``
wrappers at the bottom evaluate a single :class:`~graphgen.propnet.GraphState`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as tn
from .graphcore import Graph
from .propnet import (GraphState, init_propagation_params, init_readout_params,
                      propagate, readout, uniform_init)
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ConditionStats",
    "GraphModel",
    "Dropout",
    "HEADS",
    "addnode_logits",
    "addedge_logits",
    "node_scores",
    "init_node_states",
    "condition_features",
    "f_addnode",
    "f_addedge",
    "f_nodes",
    "f_init",
    "HeadOutput",
    "empty_state",
]

HEADS = ("addnode", "addedge", "nodes")


@dataclass
class ModelConfig:
    hidden: int = 16
    rounds: int = 2
    node_types: int = 1
    edge_types: int = 1
    cond_dim: int = 0          # projected condition width; 0 disables conditioning
    cond_inputs: int = 3
    untie_reverse: bool = False
    mask_connected: bool = False

    def __post_init__(self):
        if self.hidden <= 0:
            raise ValueError("hidden must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.node_types < 1 or self.edge_types < 1:
            raise ValueError("need at least one node type and one edge type")

    @property
    def typed_nodes(self) -> bool:
        return self.node_types > 1

    @property
    def conditional(self) -> bool:
        return self.cond_dim > 0

    def to_dict(self) -> dict:
        return asdict(self)


class Dropout:
    """Inverted dropout on the input of a head's last linear layer."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep


def _identity(x: Tensor) -> Tensor:
    return x


class ConditionStats:
    """Normalization statistics for raw condition vectors, frozen from training data."""

    cond_mean: np.ndarray
    cond_std: np.ndarray

    def set_condition_stats(self, raw: np.ndarray) -> None:
        raw = np.asarray(raw, dtype=np.float64)
        self.cond_mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        self.cond_std = np.where(std > 0, std, 1.0)

    def normalize_condition(self, raw) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.cond_mean) / self.cond_std


class GraphModel(ConditionStats):
    """Parameter store plus configuration for the graph generative model.

    ``params`` maps names to leaf tensors.  Weight matrices start uniform in
    ``±1/sqrt(fan_in)``, biases at zero.  Condition normalization statistics
    live in ``cond_mean`` / ``cond_std`` and are frozen from the training set.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
            for k, v in params.items()
        }
        k = config.cond_inputs
        self.cond_mean = np.zeros(k)
        self.cond_std = np.ones(k)

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        H = c.hidden
        p: dict[str, np.ndarray] = {
            "embed.node": rng.uniform(-1.0, 1.0, size=(c.node_types, H)),
            "embed.edge": rng.uniform(-1.0, 1.0, size=(c.edge_types, H)),
        }
        for head in HEADS:
            p.update(init_propagation_params(rng, head, H, H, c.rounds, c.untie_reverse))
        p.update(init_readout_params(rng, "addnode.readout", H, 2 * H))
        p.update(init_readout_params(rng, "addedge.readout", H, 2 * H))
        p.update(init_readout_params(rng, "init.readout", H, 2 * H))
        n_out = c.node_types + 1 if c.typed_nodes else 1
        p["addnode.out.W"] = uniform_init(rng, 2 * H, (2 * H, n_out))
        p["addnode.out.b"] = np.zeros(n_out)
        p["addedge.out.W"] = uniform_init(rng, 3 * H, (3 * H, 1))
        p["addedge.out.b"] = np.zeros(1)
        p["nodes.score.W1"] = uniform_init(rng, 2 * H, (2 * H, 2 * H))
        p["nodes.score.b1"] = np.zeros(2 * H)
        p["nodes.score.W2"] = uniform_init(rng, 2 * H, (2 * H, c.edge_types))
        p["nodes.score.b2"] = np.zeros(c.edge_types)
        p["init.W"] = uniform_init(rng, 3 * H, (3 * H, H))
        p["init.b"] = np.zeros(H)
        if c.conditional:
            p["cond.W"] = uniform_init(rng, c.cond_inputs, (c.cond_inputs, c.cond_dim))
            p["cond.b"] = np.zeros(c.cond_dim)
            p["init.Wc"] = uniform_init(rng, c.cond_dim, (c.cond_dim, H))
        return p

    # -- parameter plumbing -------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def copy(self) -> "GraphModel":
        other = GraphModel(self.config, {k: v.copy() for k, v in self.arrays().items()})
        other.cond_mean = self.cond_mean.copy()
        other.cond_std = self.cond_std.copy()
        return other

    def zero_(self) -> "GraphModel":
        for t in self.params.values():
            t.data[...] = 0.0
        return self


# ---------------------------------------------------------------------------
# batched heads


def _prop(model: GraphModel, head: str, h: Tensor, eu, ev, et) -> Tensor:
    P = model.params
    x = tn.gather(P["embed.edge"], et)
    return propagate(h, eu, ev, x, P, head, model.config.rounds, model.config.untie_reverse)


def addnode_logits(model: GraphModel, h: Tensor, eu, ev, et, seg, num_graphs: int,
                   dropout=_identity) -> tuple[Tensor, Tensor]:
    """Propagate with the add-node parameters; return states and logits.

    Logits are ``(G, K+1)`` (types then stop) for typed nodes and ``(G, 1)``
    holding the add-node logit otherwise.
    """
    P = model.params
    hT = _prop(model, "addnode", h, eu, ev, et)
    hG = readout(hT, seg, num_graphs, P, "addnode.readout")
    return hT, tn.linear(dropout(hG), P["addnode.out.W"], P["addnode.out.b"])


def addedge_logits(model: GraphModel, h: Tensor, eu, ev, et, seg, num_graphs: int,
                   new_rows: np.ndarray, dropout=_identity) -> tuple[Tensor, Tensor]:
    """Add-edge logit per graph from ``[h_G, h_v]`` with ``v`` at ``new_rows``."""
    P = model.params
    hT = _prop(model, "addedge", h, eu, ev, et)
    hG = readout(hT, seg, num_graphs, P, "addedge.readout")
    feats = tn.concat([hG, tn.gather(hT, new_rows)], axis=1)
    return hT, tn.linear(dropout(feats), P["addedge.out.W"], P["addedge.out.b"])


def node_scores(model: GraphModel, h: Tensor, eu, ev, et, new_rows: np.ndarray,
                cand_rows: np.ndarray, cand_graph: np.ndarray,
                dropout=_identity) -> tuple[Tensor, Tensor]:
    """Scores ``s[u, j]`` for every candidate row, flattened row-major.

    ``cand_graph[i]`` is the group index of candidate ``cand_rows[i]``; the
    new node of group ``g`` sits at ``new_rows[g]``.
    """
    P = model.params
    hT = _prop(model, "nodes", h, eu, ev, et)
    feats = tn.concat([tn.gather(hT, cand_rows), tn.gather(hT, new_rows[cand_graph])], axis=1)
    hidden = tn.relu(tn.linear(feats, P["nodes.score.W1"], P["nodes.score.b1"]))
    s = tn.linear(dropout(hidden), P["nodes.score.W2"], P["nodes.score.b2"])
    return hT, tn.reshape(s, (-1,))


def condition_features(model: GraphModel, cond_norm: np.ndarray) -> Tensor:
    """``tanh(W c + b)`` for normalized conditions, one row per graph."""
    P = model.params
    return tn.tanh(tn.linear(Tensor(cond_norm), P["cond.W"], P["cond.b"]))


def init_node_states(model: GraphModel, h: Tensor, seg, num_graphs: int,
                     node_types: np.ndarray, cond: Tensor | None = None) -> Tensor:
    """Initial state for one new node per graph from type, graph summary and condition."""
    P = model.params
    hG = readout(h, seg, num_graphs, P, "init.readout")
    e = tn.gather(P["embed.node"], node_types)
    out = tn.linear(tn.concat([e, hG], axis=1), P["init.W"], P["init.b"])
    if cond is not None:
        out = out + cond @ P["init.Wc"]
    return out


# ---------------------------------------------------------------------------
# single-graph wrappers


class HeadOutput(NamedTuple):
    logp: Tensor          # log-probabilities of every outcome
    state: GraphState     # propagated states, carried over to the next decision
    outcomes: list        # outcome labels aligned with ``logp``


def _single(state: GraphState):
    eu, ev, et = state.edge_arrays()
    seg = np.zeros(state.graph.num_nodes, dtype=np.intp)
    return eu, ev, et, seg


def f_addnode(model: GraphModel, state: GraphState) -> HeadOutput:
    """Distribution over ``(type_0, ..., type_{K-1}, stop)``."""
    eu, ev, et, seg = _single(state)
    hT, logits = addnode_logits(model, state.h, eu, ev, et, seg, 1)
    K = model.config.node_types
    if model.config.typed_nodes:
        logp = tn.log_softmax(logits[0])
    else:
        x = logits[0]
        logp = tn.concat([tn.log_sigmoid(x), tn.log_sigmoid(-x)])
    return HeadOutput(logp, GraphState(state.graph, hT), [*range(K), "stop"])


def f_addedge(model: GraphModel, state: GraphState, v: int) -> HeadOutput:
    """Bernoulli ``(add, stop)`` for another edge on node ``v``."""
    n = state.graph.num_nodes
    if not 0 <= v < n:
        raise IndexError(f"node {v} not in graph of {n} nodes")
    eu, ev, et, seg = _single(state)
    hT, logit = addedge_logits(model, state.h, eu, ev, et, seg, 1, np.array([v]))
    x = logit[0]
    logp = tn.concat([tn.log_sigmoid(x), tn.log_sigmoid(-x)])
    return HeadOutput(logp, GraphState(state.graph, hT), ["add", "stop"])


def f_nodes(model: GraphModel, state: GraphState, v: int,
            mask_connected: bool | None = None) -> HeadOutput:
    """Joint softmax over ``(u, edge_type)`` for ``u != v``."""
    g = state.graph
    if mask_connected is None:
        mask_connected = model.config.mask_connected
    nbrs = set(g.neighbors()[v]) if mask_connected else set()
    cands = [u for u in range(g.num_nodes) if u != v and u not in nbrs]
    if not cands:
        raise ValueError(f"no candidate nodes to connect to node {v}")
    eu, ev, et, _ = _single(state)
    J = model.config.edge_types
    hT, s = node_scores(model, state.h, eu, ev, et, np.array([v]),
                        np.array(cands), np.zeros(len(cands), dtype=np.intp))
    logp = tn.log_softmax(s)
    return HeadOutput(logp, GraphState(g, hT), [(u, j) for u in cands for j in range(J)])


def f_init(model: GraphModel, state: GraphState, node_type: int = 0,
           cond: Sequence[float] | None = None) -> Tensor:
    """Initial state of a node of ``node_type`` joining ``state``; ``cond`` is raw."""
    seg = np.zeros(state.graph.num_nodes, dtype=np.intp)
    cf = None
    if cond is not None:
        if not model.config.conditional:
            raise ValueError("model was built without conditioning")
        cf = condition_features(model, model.normalize_condition(np.atleast_2d(cond)))
    return init_node_states(model, state.h, seg, 1, np.array([node_type]), cf)[0]


def empty_state(model: GraphModel) -> GraphState:
    return GraphState(Graph(()), Tensor(np.zeros((0, model.config.hidden))))

