"""Reasoning factor graph engine for query-product recall and relevance
augmentation: LLM-distilled graph construction, frozen-embedding adapters,
and overlap-count retrieval."""

__version__ = "0.1.0"

from .graph import (
    Edge,
    EntityNode,
    FactorNode,
    FactorSubsetId,
    GraphStats,
    ReasoningFactorGraph,
    compute_graph_stats,
    deserialize_graph,
    load_graph,
    save_graph,
    serialize_graph,
)

__all__ = [
    "Edge",
    "EntityNode",
    "FactorNode",
    "FactorSubsetId",
    "GraphStats",
    "ReasoningFactorGraph",
    "compute_graph_stats",
    "deserialize_graph",
    "load_graph",
    "save_graph",
    "serialize_graph",
    "__version__",
]
