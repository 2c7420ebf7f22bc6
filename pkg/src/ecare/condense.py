"""Pipeline stage 2: per-subset factor clustering, LLM summarization, and
graph rewiring onto the merged factors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import FactorSubsetId, ReasoningFactorGraph, normalize_text
from .prompts import TemplateRegistry
from .providers import Provider

log = logging.getLogger(__name__)


class CondenseError(Exception):
    pass


@dataclass(frozen=True)
class ClusterParams:
    """Threshold community detection parameters."""

    similarity_threshold: float = 0.8
    min_community_size: int = 2

    def __post_init__(self) -> None:
        if not 0.0 < self.similarity_threshold <= 1.0:
            raise CondenseError("similarity_threshold must be in (0, 1]")
        if self.min_community_size < 2:
            raise CondenseError("min_community_size must be at least 2")


@dataclass
class ClusterAssignment:
    """Total assignment of factors to clusters within one subset."""

    cluster_of: dict[str, str]
    members: dict[str, list[str]]


def cluster_subset(
    factor_ids: Sequence[str],
    embeddings: Mapping[str, np.ndarray],
    params: ClusterParams,
) -> ClusterAssignment:
    """Deterministic threshold community detection over one subset.

    Seeds are ordered by neighborhood size (ties by id); each accepted seed
    claims its still-unassigned neighbors when that claim meets the minimum
    community size. Leftovers become singletons.
    """
    ids = sorted(factor_ids)
    if not ids:
        return ClusterAssignment(cluster_of={}, members={})
    matrix = np.stack([np.asarray(embeddings[fid], dtype=np.float64) for fid in ids])
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0):
        zero = ids[int(np.argmax(norms == 0))]
        raise CondenseError(f"zero embedding for factor {zero!r}")
    unit = matrix / norms[:, None]
    sims = unit @ unit.T
    neighbors = [np.flatnonzero(sims[i] >= params.similarity_threshold) for i in range(len(ids))]
    order = sorted(range(len(ids)), key=lambda i: (-len(neighbors[i]), ids[i]))

    assigned: dict[int, int] = {}
    cluster_members: list[list[int]] = []
    for seed in order:
        if seed in assigned:
            continue
        claimed = [j for j in neighbors[seed] if j not in assigned]
        if len(claimed) < params.min_community_size:
            continue
        cluster_index = len(cluster_members)
        ordered = [seed] + sorted((j for j in claimed if j != seed), key=lambda j: ids[j])
        for j in ordered:
            assigned[j] = cluster_index
        cluster_members.append(ordered)
    for i in range(len(ids)):
        if i not in assigned:
            assigned[i] = len(cluster_members)
            cluster_members.append([i])

    cluster_of: dict[str, str] = {}
    members: dict[str, list[str]] = {}
    for cluster_index, member_indices in enumerate(cluster_members):
        cluster_id = f"c{cluster_index}"
        members[cluster_id] = [ids[j] for j in member_indices]
        for j in member_indices:
            cluster_of[ids[j]] = cluster_id
    return ClusterAssignment(cluster_of=cluster_of, members=members)


def summarize_cluster(
    member_texts: Sequence[str], provider: Provider, registry: TemplateRegistry
) -> str:
    """Summarize a cluster into one phrase; singletons pass through."""
    if not member_texts:
        raise CondenseError("cannot summarize an empty cluster")
    if len(member_texts) == 1:
        return member_texts[0]
    rendered_list = "[" + ", ".join(member_texts) + "]"
    prompt = registry.render("cluster_summarize", {"factors": rendered_list})
    text = provider.complete(prompt).text.strip()
    if text.lower().startswith("- general phrase:"):
        text = text.split(":", 1)[1].strip()
    text = normalize_text(text)
    if not text:
        fallback = max(member_texts, key=lambda t: (len(t), t))
        log.warning("blank cluster summary; falling back to longest member %r", fallback)
        return fallback
    return text


def condense_graph(
    g0: ReasoningFactorGraph,
    assignments: Mapping[str, ClusterAssignment],
    labels: Mapping[str, Mapping[str, str]],
    meta: dict | None = None,
) -> ReasoningFactorGraph:
    """Merge each cluster into one labeled factor and re-target edges.

    `assignments` and `labels` are keyed by subset key, then cluster id.
    Parallel edges collapse with multiplicities summed; clusters that end up
    with identical normalized labels within a subset merge again.
    """
    out = ReasoningFactorGraph(stage="condensed", meta=meta or {})
    for ent in g0.entities.values():
        out.add_entity(ent.kind, ent.id, ent.text, ent.description)

    merged_id: dict[str, str] = {}
    for subset in g0.subsets():
        assignment = assignments.get(subset.key)
        if assignment is None:
            raise CondenseError(f"no cluster assignment for subset {subset.key!r}")
        subset_labels = labels.get(subset.key, {})
        for node in g0.factors_in_subset(subset):
            cluster_id = assignment.cluster_of.get(node.id)
            if cluster_id is None:
                raise CondenseError(f"assignment misses factor {node.id!r}")
            label = subset_labels.get(cluster_id)
            if label is None:
                raise CondenseError(f"no label for cluster {cluster_id!r} in subset {subset.key!r}")
            member_ids = assignment.members[cluster_id]
            member_texts = sorted(
                {text for mid in member_ids for text in g0.factors[mid].member_texts}
            )
            merged = out.get_or_create_factor(subset, label, member_texts=member_texts)
            existing = set(merged.member_texts)
            merged.member_texts = sorted(existing | set(member_texts))
            merged_id[node.id] = merged.id

    for (eid, fid), edge in sorted(g0.edges.items()):
        out.add_edge(eid, merged_id[fid], multiplicity=edge.multiplicity)
    return out


def condense_stage(
    graph: ReasoningFactorGraph,
    params: ClusterParams,
    provider: Provider,
    embedding_provider: Provider,
    registry: TemplateRegistry,
) -> ReasoningFactorGraph:
    """Cluster every subset, summarize clusters, and rewire the graph."""
    assignments: dict[str, ClusterAssignment] = {}
    labels: dict[str, dict[str, str]] = {}
    for subset in graph.subsets():
        nodes = graph.factors_in_subset(subset)
        ids = [node.id for node in nodes]
        texts = [node.text for node in nodes]
        vectors = embedding_provider.embed(texts) if texts else []
        embeddings = dict(zip(ids, vectors))
        assignment = cluster_subset(ids, embeddings, params)
        assignments[subset.key] = assignment
        text_of = {node.id: node.text for node in nodes}
        labels[subset.key] = {
            cluster_id: summarize_cluster([text_of[mid] for mid in member_ids], provider, registry)
            for cluster_id, member_ids in sorted(assignment.members.items())
        }
    meta = {
        "cluster_params": {
            "similarity_threshold": params.similarity_threshold,
            "min_community_size": params.min_community_size,
        }
    }
    return condense_graph(graph, assignments, labels, meta=meta)
