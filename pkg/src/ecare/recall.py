"""Factor-to-product inverted index and overlap-count top-k recall.

Recall work touches only the posting lists of the predicted factors, so its
cost is independent of catalog size; a brute-force scorer with an identical
output contract serves as the permanent test oracle.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

from .graph import ReasoningFactorGraph, graph_digest

log = logging.getLogger(__name__)

INDEX_FORMAT = "ecare-index"
INDEX_VERSION = 1


class RecallError(Exception):
    pass


@dataclass
class RecallResult:
    product_id: str
    score: int
    matched_factors: list[str]


@dataclass
class RecallIndex:
    """Immutable posting lists: factor id -> sorted product ids.

    `confidences` parallels `postings` with the edge confidence per product
    (0.0 when unscored); it backs the tie-break by summed confidence.
    `touched_entries` counts posting entries scanned by recall, which the
    efficiency tests assert on.
    """

    postings: dict[str, list[str]]
    confidences: dict[str, list[float]]
    product_count: int
    graph_version: str
    touched_entries: int = 0

    def postings_for(self, factor_id: str) -> tuple[list[str], list[float]]:
        products = self.postings[factor_id]
        self.touched_entries += len(products)
        return products, self.confidences[factor_id]


def build_index(graph: ReasoningFactorGraph) -> RecallIndex:
    """Invert product edges into per-factor posting lists."""
    accum: dict[str, list[tuple[str, float]]] = {}
    for (eid, fid), edge in graph.edges.items():
        entity = graph.entities[eid]
        if entity.kind != "product":
            continue
        conf = edge.confidence if edge.confidence is not None else 0.0
        accum.setdefault(fid, []).append((entity.id, conf))
    postings: dict[str, list[str]] = {}
    confidences: dict[str, list[float]] = {}
    for fid in sorted(accum):
        rows = sorted(accum[fid])
        postings[fid] = [pid for pid, _ in rows]
        confidences[fid] = [conf for _, conf in rows]
    return RecallIndex(
        postings=postings,
        confidences=confidences,
        product_count=len({e.id for e in graph.entities.values() if e.kind == "product"}),
        graph_version=graph_digest(graph),
    )


def _ranked_results(
    scores: dict[str, tuple[int, float, list[str]]], k: int
) -> list[RecallResult]:
    order = sorted(
        scores.items(), key=lambda item: (-item[1][0], -item[1][1], item[0])
    )
    return [
        RecallResult(product_id=pid, score=count, matched_factors=sorted(matched))
        for pid, (count, _, matched) in order[:k]
    ]


def recall(index: RecallIndex, predicted_factors: Sequence[str], k: int) -> list[RecallResult]:
    """Top-k products by overlap count with the predicted factors.

    Ties break by summed edge confidence descending, then product id
    ascending. Products with zero overlap are never returned; factors
    unknown to the index are skipped with a warning.
    """
    if k < 1:
        raise RecallError("k must be positive")
    seen: set[str] = set()
    scores: dict[str, tuple[int, float, list[str]]] = {}
    for fid in predicted_factors:
        if fid in seen:
            continue
        seen.add(fid)
        if fid not in index.postings:
            log.warning("predicted factor %s is not in the index; skipped", fid)
            continue
        products, confs = index.postings_for(fid)
        for pid, conf in zip(products, confs):
            count, total_conf, matched = scores.get(pid, (0, 0.0, []))
            scores[pid] = (count + 1, total_conf + conf, matched + [fid])
    return _ranked_results(scores, k)


def brute_force_recall(
    graph: ReasoningFactorGraph, predicted_factors: Sequence[str], k: int
) -> list[RecallResult]:
    """Reference recall by direct edge lookup over every product."""
    if k < 1:
        raise RecallError("k must be positive")
    wanted = []
    seen: set[str] = set()
    for fid in predicted_factors:
        if fid not in seen:
            seen.add(fid)
            if fid in graph.factors:
                wanted.append(fid)
    scores: dict[str, tuple[int, float, list[str]]] = {}
    for product in graph.entities_of_kind("product"):
        matched = []
        total_conf = 0.0
        for fid in wanted:
            edge = graph.edges.get((product.id, fid))
            if edge is not None:
                matched.append(fid)
                total_conf += edge.confidence if edge.confidence is not None else 0.0
        if matched:
            scores[product.id] = (len(matched), total_conf, matched)
    return _ranked_results(scores, k)


def save_index(index: RecallIndex, path) -> None:
    """Persist as JSONL: header with the graph version, then sorted postings."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "kind": "header",
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "graph_version": index.graph_version,
            "product_count": index.product_count,
        }
        fh.write(json.dumps(header, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n")
        for fid in sorted(index.postings):
            record = {
                "factor": fid,
                "products": index.postings[fid],
                "confidences": index.confidences[fid],
            }
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n")


def load_index(path) -> RecallIndex:
    postings: dict[str, list[str]] = {}
    confidences: dict[str, list[float]] = {}
    header: dict | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecallError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if lineno == 1:
                if record.get("format") != INDEX_FORMAT:
                    raise RecallError(f"{path}: not an index file")
                if record.get("version") != INDEX_VERSION:
                    raise RecallError(f"{path}: unsupported index version {record.get('version')!r}")
                header = record
                continue
            fid = record["factor"]
            postings[fid] = list(record["products"])
            confidences[fid] = [float(c) for c in record.get("confidences", [0.0] * len(postings[fid]))]
    if header is None:
        raise RecallError(f"{path}: empty index file")
    return RecallIndex(
        postings=postings,
        confidences=confidences,
        product_count=int(header.get("product_count", 0)),
        graph_version=str(header.get("graph_version", "")),
    )
