"""Pipeline stage 3: contrastive-probability edge scoring, per-class
thresholds, and top-k caps per (entity, subset)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

from .graph import Edge, FactorSubsetId, ReasoningFactorGraph
from .prompts import TemplateRegistry
from .providers import Provider

log = logging.getLogger(__name__)

EdgeKey = tuple[str, str]


class FilterError(Exception):
    pass


def edge_class(entity_kind: str, subset: FactorSubsetId) -> str:
    return f"{entity_kind}:{subset.key}"


@dataclass
class FilterPolicy:
    """Per-edge-class confidence thresholds and top-k caps.

    Classes are keyed ``<entity kind>:<subset kind>:<tag>``; unlisted classes
    fall back to the defaults.
    """

    default_threshold: float = 0.2
    default_top_k: int = 2
    thresholds: dict[str, float] = field(default_factory=dict)
    top_k: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for cls, value in {**self.thresholds, "default": self.default_threshold}.items():
            if not -1.0 <= value <= 1.0:
                raise FilterError(f"threshold for {cls!r} outside [-1, 1]: {value}")
        for cls, value in {**self.top_k, "default": self.default_top_k}.items():
            if value < 1:
                raise FilterError(f"top_k for {cls!r} must be positive: {value}")

    def threshold_for(self, cls: str) -> float:
        return self.thresholds.get(cls, self.default_threshold)

    def top_k_for(self, cls: str) -> int:
        return self.top_k.get(cls, self.default_top_k)

    def to_json(self) -> dict:
        return {
            "default_threshold": self.default_threshold,
            "default_top_k": self.default_top_k,
            "thresholds": dict(sorted(self.thresholds.items())),
            "top_k": dict(sorted(self.top_k.items())),
        }


def _filter_template_id(entity_kind: str, subset: FactorSubsetId) -> str:
    return f"filter_{entity_kind}_{subset.kind}_{subset.tag}"


def score_edge(
    edge: Edge,
    graph: ReasoningFactorGraph,
    provider: Provider,
    registry: TemplateRegistry,
) -> float:
    """Confidence of one edge: p(YES) - p(NO) under its filter prompt."""
    entity = graph.entities[edge.entity]
    factor = graph.factors[edge.factor]
    template_id = _filter_template_id(entity.kind, factor.subset)
    bindings = {"factor": factor.text}
    bindings["query" if entity.kind == "query" else "product"] = entity.text
    prompt = registry.render(template_id, bindings)
    p_yes, p_no = provider.yes_no_probabilities(prompt)
    return p_yes - p_no


def score_graph_edges(
    graph: ReasoningFactorGraph, provider: Provider, registry: TemplateRegistry
) -> dict[EdgeKey, float]:
    """Score every edge; deterministic iteration over sorted edge keys."""
    return {
        key: score_edge(edge, graph, provider, registry)
        for key, edge in sorted(graph.edges.items())
    }


def filter_graph(
    graph: ReasoningFactorGraph,
    scores: Mapping[EdgeKey, float],
    policy: FilterPolicy,
) -> ReasoningFactorGraph:
    """Drop low-confidence edges, cap each (entity, subset) at top-k, and
    remove factors left without edges.

    Ties rank by higher multiplicity first, then factor id ascending.
    """
    for key in graph.edges:
        if key not in scores:
            raise FilterError(f"no score for edge {key!r}")

    survivors: list[tuple[EdgeKey, float]] = []
    per_group: dict[tuple[str, str], list[tuple[EdgeKey, float]]] = {}
    for key, edge in graph.edges.items():
        entity = graph.entities[edge.entity]
        subset = graph.factors[edge.factor].subset
        cls = edge_class(entity.kind, subset)
        score = scores[key]
        if score < policy.threshold_for(cls):
            continue
        per_group.setdefault((edge.entity, subset.key), []).append((key, score))

    for (entity_id, subset_key), scored in sorted(per_group.items()):
        entity = graph.entities[entity_id]
        cls = f"{entity.kind}:{subset_key}"
        cap = policy.top_k_for(cls)
        ranked = sorted(
            scored,
            key=lambda item: (-item[1], -graph.edges[item[0]].multiplicity, item[0][1]),
        )
        survivors.extend(ranked[:cap])

    out = ReasoningFactorGraph(
        stage="filtered",
        meta={**graph.meta, "filter_policy": policy.to_json()},
    )
    for ent in graph.entities.values():
        out.add_entity(ent.kind, ent.id, ent.text, ent.description)
    kept_factors = {key[1] for key, _ in survivors}
    for fid in sorted(kept_factors):
        node = graph.factors[fid]
        restored = out.get_or_create_factor(node.subset, node.text, member_texts=node.member_texts)
        assert restored.id == fid
    for key, score in sorted(survivors):
        edge = graph.edges[key]
        out.add_edge(edge.entity, edge.factor, multiplicity=edge.multiplicity, confidence=score)
    out.meta["orphan_factors_removed"] = len(graph.factors) - len(kept_factors)
    return out
