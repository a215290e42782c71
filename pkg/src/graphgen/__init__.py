"""Autoregressive generative model of graphs built on graph neural networks."""

from .graphcore import (AddEdge, AddNode, Graph, GrammarError, PickNode, StopEdges,
                        StopNodes, decisions_from_graph, replay)
from .heads import GraphModel, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "AddEdge", "AddNode", "Graph", "GrammarError", "GraphModel", "ModelConfig",
    "PickNode", "StopEdges", "StopNodes", "decisions_from_graph", "replay",
]
