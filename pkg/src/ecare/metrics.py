"""Evaluation metrics: macro/micro F1, Recall@k / Precision@k, ranking
baselines, and cross-stage pipeline reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .adapter import EmbedFn
from .graph import GraphStats, ReasoningFactorGraph, compute_graph_stats

log = logging.getLogger(__name__)

STAGE_ORDER = ("g0", "condensed", "filtered", "rewired")


class MetricsError(Exception):
    pass


@dataclass
class ConfusionMatrix:
    """Square count matrix indexed by the label vocabulary."""

    labels: tuple[str, ...]
    counts: np.ndarray

    @classmethod
    def from_pairs(
        cls, predictions: Sequence[str], truths: Sequence[str], vocabulary: Sequence[str]
    ) -> "ConfusionMatrix":
        if len(predictions) != len(truths):
            raise MetricsError(
                f"length mismatch: {len(predictions)} predictions vs {len(truths)} truths"
            )
        labels = tuple(vocabulary)
        index = {label: i for i, label in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for pred, truth in zip(predictions, truths):
            if pred not in index or truth not in index:
                raise MetricsError(f"label outside vocabulary: {pred!r} / {truth!r}")
            counts[index[truth], index[pred]] += 1
        return cls(labels=labels, counts=counts)


def f1_scores(
    predictions: Sequence[str], truths: Sequence[str], vocabulary: Sequence[str]
) -> tuple[float, float, dict[str, float]]:
    """(macro F1, micro F1, per-class F1).

    Macro averages over the full vocabulary, so classes absent from the
    batch contribute zero. Micro pools counts, which for single-label
    multi-class equals accuracy.
    """
    cm = ConfusionMatrix.from_pairs(predictions, truths, vocabulary)
    per_class: dict[str, float] = {}
    for i, label in enumerate(cm.labels):
        tp = cm.counts[i, i]
        fp = cm.counts[:, i].sum() - tp
        fn = cm.counts[i, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall_ = tp / (tp + fn) if tp + fn else 0.0
        per_class[label] = (
            2 * precision * recall_ / (precision + recall_) if precision + recall_ else 0.0
        )
    macro = float(np.mean([per_class[label] for label in cm.labels]))
    total = cm.counts.sum()
    micro = float(np.trace(cm.counts) / total) if total else 0.0
    return macro, micro, per_class


def recall_precision_at_k(
    ranked: Sequence[str], relevant: set[str], k: int
) -> tuple[float, float]:
    """Recall@k and Precision@k; short rankings are not padded."""
    if k < 1:
        raise MetricsError("k must be positive")
    if not relevant:
        raise MetricsError("relevant set is empty; recall undefined")
    hits = len(set(ranked[:k]) & relevant)
    return hits / len(relevant), hits / k


def lexical_overlap_ranking(
    query_text: str, products: Sequence[tuple[str, str]], k: int
) -> list[str]:
    """Token-overlap baseline: rank product ids by shared token count."""
    query_tokens = set(query_text.lower().split())
    scored = sorted(
        ((len(query_tokens & set(text.lower().split())), pid) for pid, text in products),
        key=lambda item: (-item[0], item[1]),
    )
    return [pid for _, pid in scored[:k]]


def random_ranking(product_ids: Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    ids = list(product_ids)
    rng.shuffle(ids)
    return ids[:k]


@dataclass
class PipelineReport:
    """Per-stage graph statistics with deltas and monotonicity flags."""

    stages: list[str]
    stats: list[GraphStats]
    deltas: list[dict[str, int]]
    flags: list[str]

    def to_json(self) -> dict:
        return {
            "stages": self.stages,
            "stats": [s.to_json() for s in self.stats],
            "deltas": self.deltas,
            "flags": self.flags,
        }


def pipeline_report(
    stage_graphs: Sequence[tuple[str, ReasoningFactorGraph]],
    embed_fn: EmbedFn,
    strict: bool = True,
) -> PipelineReport:
    """Stats across pipeline stages.

    Node and edge counts must be non-increasing across the condense and
    filter transitions (raises in strict mode when violated); the in-group
    similarity trajectory is reported, never asserted.
    """
    if len(stage_graphs) < 2:
        raise MetricsError("need at least two stages")
    known = [name for name, _ in stage_graphs]
    positions = []
    for name in known:
        if name not in STAGE_ORDER:
            raise MetricsError(f"unknown stage {name!r}; expected one of {STAGE_ORDER}")
        positions.append(STAGE_ORDER.index(name))
    if positions != sorted(positions) or len(set(positions)) != len(positions):
        raise MetricsError(f"stages out of pipeline order: {known}")

    stats: list[GraphStats] = []
    for _, graph in stage_graphs:
        factor_texts = {}
        for fid in sorted(graph.connected_factor_ids()):
            factor_texts[fid] = graph.factors[fid].text
        ids = sorted(factor_texts)
        vectors = embed_fn([factor_texts[fid] for fid in ids]) if ids else []
        stats.append(compute_graph_stats(graph, dict(zip(ids, vectors))))

    deltas: list[dict[str, int]] = []
    flags: list[str] = []
    shrink_targets = {"condensed", "filtered"}
    for (prev_name, _), (next_name, _), prev, nxt in zip(
        stage_graphs, stage_graphs[1:], stats, stats[1:]
    ):
        delta = {
            "nodes": nxt.total_factors - prev.total_factors,
            "edges": nxt.total_edges - prev.total_edges,
            "multiplicity": nxt.total_multiplicity - prev.total_multiplicity,
        }
        deltas.append(delta)
        if next_name in shrink_targets and (delta["nodes"] > 0 or delta["edges"] > 0):
            message = f"{prev_name}->{next_name}: node/edge count increased {delta}"
            if strict:
                raise MetricsError(message)
            flags.append(message)
    return PipelineReport(stages=known, stats=stats, deltas=deltas, flags=flags)
