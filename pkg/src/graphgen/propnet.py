"""Message passing with reverse messages, GRU node updates and gated readout.

All functions work on a *union* of graphs: node states ``h`` are rows of one
matrix, edges are index arrays into those rows, and readout sums rows into
per-graph buckets.  A single graph is just the one-segment case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .graphcore import Graph
from .tensor import Tensor

__all__ = [
    "GraphState",
    "init_propagation_params",
    "init_readout_params",
    "propagate_round",
    "propagate",
    "readout",
    "uniform_init",
]


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def init_propagation_params(rng: np.random.Generator, prefix: str, hidden: int,
                            edge_dim: int, rounds: int,
                            untie_reverse: bool = False) -> dict[str, np.ndarray]:
    """Untied per-round weights: linear message map and a GRU update."""
    H = hidden
    msg_in = 2 * H + edge_dim
    out: dict[str, np.ndarray] = {}
    for r in range(rounds):
        p = f"{prefix}.prop{r}"
        out[f"{p}.msg.W"] = uniform_init(rng, msg_in, (msg_in, 2 * H))
        out[f"{p}.msg.b"] = np.zeros(2 * H)
        if untie_reverse:
            out[f"{p}.rmsg.W"] = uniform_init(rng, msg_in, (msg_in, 2 * H))
            out[f"{p}.rmsg.b"] = np.zeros(2 * H)
        for gate in ("z", "r", "h"):
            out[f"{p}.gru.W{gate}"] = uniform_init(rng, 2 * H, (2 * H, H))
            out[f"{p}.gru.U{gate}"] = uniform_init(rng, H, (H, H))
            out[f"{p}.gru.b{gate}"] = np.zeros(H)
    return out


def init_readout_params(rng: np.random.Generator, prefix: str, hidden: int,
                        out_dim: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.fm.W": uniform_init(rng, hidden, (hidden, out_dim)),
        f"{prefix}.fm.b": np.zeros(out_dim),
        f"{prefix}.gm.W": uniform_init(rng, hidden, (hidden, out_dim)),
        f"{prefix}.gm.b": np.zeros(out_dim),
    }


def _gru(a: Tensor, h: Tensor, P: Mapping[str, Tensor], p: str) -> Tensor:
    return tn.gru_cell(a, h, *(P[f"{p}.gru.{k}"] for k in
                               ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")))


def propagate_round(h: Tensor, eu: np.ndarray, ev: np.ndarray, edge_x: Tensor,
                    P: Mapping[str, Tensor], prefix: str, r: int,
                    untie_reverse: bool = False) -> Tensor:
    """One round: messages on every edge in both directions, then a GRU update.

    ``eu -> ev`` is the stored edge direction and ``edge_x`` holds one
    feature row per stored edge.  The message into a receiver is
    ``W [h_sender, h_receiver, x] + b``; reverse messages use the ``rmsg``
    weights when untied.
    """
    H = h.shape[1]
    p = f"{prefix}.prop{r}"
    W = P[f"{p}.msg.W"]
    if W.shape[1] != 2 * H or W.shape[0] != 2 * H + edge_x.shape[1]:
        raise tn.ShapeError("propagate_round", h.shape, W.shape, edge_x.shape)
    n = h.shape[0]
    if untie_reverse:
        a = (tn.message_sum(h, eu, ev, edge_x, W, P[f"{p}.msg.b"], n)
             + tn.message_sum(h, ev, eu, edge_x, P[f"{p}.rmsg.W"], P[f"{p}.rmsg.b"], n))
    else:
        send = np.concatenate([eu, ev])
        recv = np.concatenate([ev, eu])
        x2 = tn.concat([edge_x, edge_x], axis=0)
        a = tn.message_sum(h, send, recv, x2, W, P[f"{p}.msg.b"], n)
    return _gru(a, h, P, p)


def propagate(h: Tensor, eu: np.ndarray, ev: np.ndarray, edge_x: Tensor,
              P: Mapping[str, Tensor], prefix: str, rounds: int,
              untie_reverse: bool = False) -> Tensor:
    for r in range(rounds):
        h = propagate_round(h, eu, ev, edge_x, P, prefix, r, untie_reverse)
    return h


def readout(h: Tensor, seg: np.ndarray, num_graphs: int,
            P: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Gated sum ``sum_v sigmoid(g_m(h_v)) * f_m(h_v)`` per graph."""
    return tn.gated_sum(h, seg, num_graphs, P[f"{prefix}.fm.W"], P[f"{prefix}.fm.b"],
                        P[f"{prefix}.gm.W"], P[f"{prefix}.gm.b"])


@dataclass
class GraphState:
    """Node states for one graph together with its structure."""

    graph: Graph
    h: Tensor

    def __post_init__(self):
        if self.h.shape[0] != self.graph.num_nodes:
            raise tn.ShapeError("GraphState", self.h.shape, (self.graph.num_nodes,),
                                detail="one state row per node")

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        e = np.asarray(self.graph.edges, dtype=np.intp).reshape(-1, 3)
        return e[:, 0], e[:, 1], e[:, 2]

    def edge_features(self, P: Mapping[str, Tensor]) -> Tensor:
        return tn.gather(P["embed.edge"], self.edge_arrays()[2])

    def propagate(self, P: Mapping[str, Tensor], prefix: str, rounds: int,
                  untie_reverse: bool = False) -> "GraphState":
        eu, ev, _ = self.edge_arrays()
        h = propagate(self.h, eu, ev, self.edge_features(P), P, prefix, rounds, untie_reverse)
        return GraphState(self.graph, h)

    def propagate_round(self, P: Mapping[str, Tensor], prefix: str, r: int,
                        untie_reverse: bool = False) -> "GraphState":
        eu, ev, _ = self.edge_arrays()
        h = propagate_round(self.h, eu, ev, self.edge_features(P), P, prefix, r, untie_reverse)
        return GraphState(self.graph, h)

    def readout(self, P: Mapping[str, Tensor], prefix: str) -> Tensor:
        seg = np.zeros(self.graph.num_nodes, dtype=np.intp)
        return readout(self.h, seg, 1, P, prefix)[0]
