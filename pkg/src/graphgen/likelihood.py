"""Marginal likelihood ``log p(G) = log sum_pi p(G, pi)`` and related quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import tensor as tn
from .generator import sequence_logprobs
from .graphcore import (Graph, Ordering, canonical_ordering, decisions_from_graph,
                        enumerate_orderings, random_full_ordering)
from .heads import GraphModel

__all__ = [
    "MAX_ENUM_NODES",
    "GraphTooLargeError",
    "MarginalEstimate",
    "ordering_logprobs",
    "marginal_bruteforce",
    "marginal_importance",
    "best_ordering_nll",
    "fixed_ordering_nll",
]

MAX_ENUM_NODES = 7


class GraphTooLargeError(ValueError):
    pass


@dataclass
class MarginalEstimate:
    log_p: float
    stderr: float
    num_samples: int
    lower_bound: bool = False


def _score(model: GraphModel, g: Graph, orders: list[Ordering], cond, chunk: int) -> np.ndarray:
    out = []
    with tn.no_tape():
        for i in range(0, len(orders), chunk):
            part = orders[i:i + chunk]
            seqs = [decisions_from_graph(g, o) for o in part]
            conds = None if cond is None else np.tile(np.asarray(cond, float), (len(part), 1))
            lp, _ = sequence_logprobs(model, seqs, conds)
            out.append(lp.data)
    return np.concatenate(out) if out else np.zeros(0)


def ordering_logprobs(model: GraphModel, g: Graph, cond=None, *, cap: int = MAX_ENUM_NODES,
                      chunk: int = 256) -> np.ndarray:
    """``log p(G, pi)`` for every node order times edge-batch order."""
    if g.num_nodes > cap:
        raise GraphTooLargeError(
            f"graph has {g.num_nodes} nodes, enumeration cap is {cap}; "
            "use marginal_importance instead")
    return _score(model, g, list(enumerate_orderings(g)), cond, chunk)


def marginal_bruteforce(model: GraphModel, g: Graph, cond=None, *,
                        cap: int = MAX_ENUM_NODES) -> float:
    return float(logsumexp(ordering_logprobs(model, g, cond, cap=cap)))


def best_ordering_nll(model: GraphModel, g: Graph, cond=None, *,
                      cap: int = MAX_ENUM_NODES) -> float:
    return float(-ordering_logprobs(model, g, cond, cap=cap).max())


def fixed_ordering_nll(model: GraphModel, g: Graph, cond=None,
                       family: str | None = None) -> float:
    return float(-_score(model, g, [canonical_ordering(g, family)], cond, 1)[0])


def marginal_importance(model: GraphModel, g: Graph, q: str = "uniform",
                        num_samples: int = 1000, rng: np.random.Generator | None = None,
                        cond=None, family: str | None = None,
                        chunk: int = 256) -> MarginalEstimate:
    """Importance-sampling estimate of ``log p(G)``.

    ``q="uniform"`` draws a uniform node permutation and uniform edge-batch
    permutations; the standard error is the delta-method error of the log of
    the weight mean.  ``q="canonical"`` puts all mass on the canonical
    ordering and is only a lower bound.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    if q == "canonical":
        return MarginalEstimate(-fixed_ordering_nll(model, g, cond, family), 0.0, 1, True)
    if q != "uniform":
        raise ValueError(f"unknown proposal {q!r}")
    rng = rng if rng is not None else np.random.default_rng()
    draws = [random_full_ordering(g, rng) for _ in range(num_samples)]
    logp = _score(model, g, [o for o, _ in draws], cond, chunk)
    logw = logp - np.array([lq for _, lq in draws])
    est = float(logsumexp(logw) - np.log(num_samples))
    w = np.exp(logw - logw.max())
    if num_samples > 1 and w.mean() > 0:
        se = float(w.std(ddof=1) / (np.sqrt(num_samples) * w.mean()))
    else:
        se = 0.0
    return MarginalEstimate(est, se, num_samples)

