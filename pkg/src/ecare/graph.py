"""Reasoning factor graph data model, JSONL persistence, and graph statistics.

The graph links query/product entity nodes to text-based factor nodes.
Factors are partitioned into subsets: one per product feature type, one per
utility scope, and a single shared need subset. Edges are bipartite
(entities to factors only), carry an interaction multiplicity, and gain a
confidence score once the edge-filtering stage has run.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Mapping

import numpy as np

GRAPH_FORMAT = "ecare-graph"
GRAPH_VERSION = 1

SUBSET_KINDS = ("feature", "need", "utility")
ENTITY_KINDS = ("query", "product")

_WHITESPACE = re.compile(r"\s+")


class GraphError(Exception):
    """Base class for graph model errors."""


class GraphFormatError(GraphError):
    """A serialized graph cannot be parsed."""


class UnsupportedVersionError(GraphFormatError):
    """The header declares a format version this code does not speak."""


class GraphIntegrityError(GraphError):
    """A graph violates a structural invariant."""


class GraphStatsError(GraphError):
    """Statistics cannot be computed from the given inputs."""


def normalize_text(text: str) -> str:
    """Trim, collapse internal whitespace, and lowercase a phrase."""
    return _WHITESPACE.sub(" ", text.strip()).lower()


@dataclass(frozen=True, order=True)
class FactorSubsetId:
    """Identifies one factor subset: a feature type, a utility scope, or need.

    The tag is the feature type name for ``feature`` subsets, the scope name
    for ``utility`` subsets, and the fixed string ``"need"`` for the single
    need subset.
    """

    kind: str
    tag: str

    def __post_init__(self) -> None:
        if self.kind not in SUBSET_KINDS:
            raise GraphIntegrityError(f"unknown subset kind {self.kind!r}")
        if self.kind == "need" and self.tag != "need":
            raise GraphIntegrityError("the need subset uses the fixed tag 'need'")
        if not self.tag:
            raise GraphIntegrityError("subset tag must be non-empty")

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.tag}"

    @classmethod
    def feature(cls, name: str) -> "FactorSubsetId":
        return cls("feature", name)

    @classmethod
    def need(cls) -> "FactorSubsetId":
        return cls("need", "need")

    @classmethod
    def utility(cls, scope: str) -> "FactorSubsetId":
        return cls("utility", scope)

    @classmethod
    def from_key(cls, key: str) -> "FactorSubsetId":
        kind, sep, tag = key.partition(":")
        if not sep:
            raise GraphFormatError(f"malformed subset key {key!r}")
        return cls(kind, tag)


@dataclass
class FactorNode:
    """One reasoning factor: a normalized phrase within a subset."""

    id: str
    subset: FactorSubsetId
    text: str
    member_texts: list[str] = field(default_factory=list)


@dataclass
class EntityNode:
    """A query or product node; products carry an optional description."""

    id: str
    kind: str
    text: str
    description: str = ""


@dataclass
class Edge:
    """Connects an entity to a factor; at most one edge per pair."""

    entity: str
    factor: str
    multiplicity: int = 1
    confidence: float | None = None


def factor_id(subset: FactorSubsetId, text: str) -> str:
    """Canonical factor id derived from (subset, normalized text)."""
    digest = hashlib.sha1(f"{subset.key}\x00{text}".encode("utf-8")).hexdigest()[:16]
    return f"a:{subset.key}:{digest}"


class ReasoningFactorGraph:
    """Mutable builder and container for the reasoning factor graph.

    The pipeline treats a graph as frozen once a stage completes; stages
    produce new graphs rather than mutating their input.
    """

    def __init__(self, stage: str = "g0", meta: dict | None = None) -> None:
        self.stage = stage
        self.meta: dict = dict(meta or {})
        self.factors: dict[str, FactorNode] = {}
        self.entities: dict[str, EntityNode] = {}
        self.edges: dict[tuple[str, str], Edge] = {}
        self._factor_by_key: dict[tuple[str, str], str] = {}

    # -- construction -----------------------------------------------------

    def add_entity(self, kind: str, entity_id: str, text: str, description: str = "") -> EntityNode:
        if kind not in ENTITY_KINDS:
            raise GraphIntegrityError(f"unknown entity kind {kind!r}")
        if kind == "query" and description:
            raise GraphIntegrityError(f"query {entity_id!r} must have empty description")
        existing = self.entities.get(entity_id)
        if existing is not None:
            if existing.kind != kind or existing.text != text:
                raise GraphIntegrityError(f"conflicting redefinition of entity {entity_id!r}")
            return existing
        node = EntityNode(id=entity_id, kind=kind, text=text, description=description)
        self.entities[entity_id] = node
        return node

    def get_or_create_factor(
        self, subset: FactorSubsetId, text: str, member_texts: Iterable[str] | None = None
    ) -> FactorNode:
        normalized = normalize_text(text)
        if not normalized:
            raise GraphIntegrityError(f"factor text {text!r} is empty after normalization")
        key = (subset.key, normalized)
        fid = self._factor_by_key.get(key)
        if fid is not None:
            return self.factors[fid]
        fid = factor_id(subset, normalized)
        members = sorted(set(member_texts)) if member_texts else [normalized]
        node = FactorNode(id=fid, subset=subset, text=normalized, member_texts=members)
        self.factors[fid] = node
        self._factor_by_key[key] = fid
        return node

    def add_edge(
        self,
        entity_id: str,
        factor_id_: str,
        multiplicity: int = 1,
        confidence: float | None = None,
    ) -> Edge:
        if entity_id not in self.entities:
            raise GraphIntegrityError(f"edge references unknown entity {entity_id!r}")
        if factor_id_ not in self.factors:
            raise GraphIntegrityError(f"edge references unknown factor {factor_id_!r}")
        if multiplicity < 1:
            raise GraphIntegrityError("edge multiplicity must be >= 1")
        if confidence is not None and not -1.0 <= confidence <= 1.0:
            raise GraphIntegrityError(f"edge confidence {confidence} outside [-1, 1]")
        key = (entity_id, factor_id_)
        edge = self.edges.get(key)
        if edge is None:
            edge = Edge(entity=entity_id, factor=factor_id_, multiplicity=multiplicity, confidence=confidence)
            self.edges[key] = edge
        else:
            edge.multiplicity += multiplicity
            if confidence is not None:
                edge.confidence = confidence
        return edge

    # -- queries ----------------------------------------------------------

    def subsets(self) -> list[FactorSubsetId]:
        """Subsets populated by at least one factor node, sorted by key."""
        seen = {f.subset for f in self.factors.values()}
        return sorted(seen, key=lambda s: s.key)

    def factors_in_subset(self, subset: FactorSubsetId) -> list[FactorNode]:
        return sorted(
            (f for f in self.factors.values() if f.subset == subset), key=lambda f: f.id
        )

    def entities_of_kind(self, kind: str) -> list[EntityNode]:
        return sorted((e for e in self.entities.values() if e.kind == kind), key=lambda e: e.id)

    def edges_of_entity(self, entity_id: str, subset: FactorSubsetId | None = None) -> list[Edge]:
        edges = [e for (eid, _), e in self.edges.items() if eid == entity_id]
        if subset is not None:
            edges = [e for e in edges if self.factors[e.factor].subset == subset]
        return sorted(edges, key=lambda e: e.factor)

    def connected_factor_ids(self) -> set[str]:
        return {fid for (_, fid) in self.edges}

    def total_multiplicity(self) -> int:
        return sum(e.multiplicity for e in self.edges.values())

    def copy(self, stage: str | None = None, meta: dict | None = None) -> "ReasoningFactorGraph":
        """Deep structural copy, optionally retagged for the next stage."""
        out = ReasoningFactorGraph(stage=stage or self.stage, meta=dict(meta if meta is not None else self.meta))
        for node in self.factors.values():
            out.factors[node.id] = FactorNode(node.id, node.subset, node.text, list(node.member_texts))
            out._factor_by_key[(node.subset.key, node.text)] = node.id
        for ent in self.entities.values():
            out.entities[ent.id] = EntityNode(ent.id, ent.kind, ent.text, ent.description)
        for key, edge in self.edges.items():
            out.edges[key] = Edge(edge.entity, edge.factor, edge.multiplicity, edge.confidence)
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReasoningFactorGraph):
            return NotImplemented
        return (
            self.stage == other.stage
            and self.meta == other.meta
            and self.factors == other.factors
            and self.entities == other.entities
            and self.edges == other.edges
        )

    def validate(self) -> None:
        """Check all structural invariants; raises GraphIntegrityError."""
        by_key: dict[tuple[str, str], str] = {}
        for fid, node in self.factors.items():
            if node.id != fid:
                raise GraphIntegrityError(f"factor {fid!r} stored under mismatched id")
            if normalize_text(node.text) != node.text or not node.text:
                raise GraphIntegrityError(f"factor {fid!r} text is not normalized")
            key = (node.subset.key, node.text)
            if key in by_key:
                raise GraphIntegrityError(f"duplicate factor key {key!r}")
            by_key[key] = fid
        for ent in self.entities.values():
            if ent.kind not in ENTITY_KINDS:
                raise GraphIntegrityError(f"entity {ent.id!r} has unknown kind {ent.kind!r}")
            if ent.kind == "query" and ent.description:
                raise GraphIntegrityError(f"query {ent.id!r} has a description")
        for (eid, fid), edge in self.edges.items():
            if eid not in self.entities:
                raise GraphIntegrityError(f"edge ({eid!r}, {fid!r}) references unknown entity")
            if fid not in self.factors:
                raise GraphIntegrityError(f"edge ({eid!r}, {fid!r}) references unknown factor")
            if edge.multiplicity < 1:
                raise GraphIntegrityError(f"edge ({eid!r}, {fid!r}) has multiplicity < 1")
            if edge.confidence is not None and not -1.0 <= edge.confidence <= 1.0:
                raise GraphIntegrityError(f"edge ({eid!r}, {fid!r}) confidence outside [-1, 1]")


# -- persistence ----------------------------------------------------------


def _dump(record: dict) -> bytes:
    return json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def serialize_graph(graph: ReasoningFactorGraph, sink: BinaryIO) -> None:
    """Write the graph as a JSONL stream with a header and sorted records.

    Emission is sorted by (kind, id) so two serializations of the same graph
    are byte-identical.
    """
    header = {
        "kind": "header",
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "stage": graph.stage,
        "meta": graph.meta,
    }
    records: list[tuple[tuple, dict]] = []
    for edge in graph.edges.values():
        rec = {
            "kind": "edge",
            "entity": edge.entity,
            "factor": edge.factor,
            "multiplicity": edge.multiplicity,
        }
        if edge.confidence is not None:
            rec["confidence"] = edge.confidence
        records.append((("edge", edge.entity, edge.factor), rec))
    for ent in graph.entities.values():
        records.append(
            (
                ("entity", ent.id, ""),
                {
                    "kind": "entity",
                    "id": ent.id,
                    "entity_kind": ent.kind,
                    "text": ent.text,
                    "description": ent.description,
                },
            )
        )
    for node in graph.factors.values():
        records.append(
            (
                ("factor", node.id, ""),
                {
                    "kind": "factor",
                    "id": node.id,
                    "subset": node.subset.key,
                    "text": node.text,
                    "member_texts": node.member_texts,
                },
            )
        )
    try:
        sink.write(_dump(header))
        for _, rec in sorted(records, key=lambda item: item[0]):
            sink.write(_dump(rec))
    except OSError as exc:
        raise GraphError(f"write error at byte offset {sink.tell()}: {exc}") from exc


def deserialize_graph(source: BinaryIO) -> ReasoningFactorGraph:
    """Rebuild a graph from its JSONL stream, validating all invariants."""
    graph: ReasoningFactorGraph | None = None
    pending_edges: list[tuple[int, dict]] = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.decode("utf-8").strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"malformed JSON on line {lineno}: {exc}") from exc
        kind = record.get("kind")
        if lineno == 1:
            if kind != "header" or record.get("format") != GRAPH_FORMAT:
                raise GraphFormatError("line 1: expected an ecare-graph header record")
            if record.get("version") != GRAPH_VERSION:
                raise UnsupportedVersionError(
                    f"unsupported graph version {record.get('version')!r} (expected {GRAPH_VERSION})"
                )
            graph = ReasoningFactorGraph(stage=record.get("stage", "g0"), meta=record.get("meta", {}))
            continue
        if graph is None:
            raise GraphFormatError("stream does not start with a header record")
        try:
            if kind == "factor":
                subset = FactorSubsetId.from_key(record["subset"])
                node = FactorNode(
                    id=record["id"],
                    subset=subset,
                    text=record["text"],
                    member_texts=list(record.get("member_texts", [record["text"]])),
                )
                if node.id in graph.factors:
                    raise GraphIntegrityError(f"duplicate factor id {node.id!r} on line {lineno}")
                graph.factors[node.id] = node
                graph._factor_by_key[(subset.key, node.text)] = node.id
            elif kind == "entity":
                graph.add_entity(
                    record["entity_kind"], record["id"], record["text"], record.get("description", "")
                )
            elif kind == "edge":
                pending_edges.append((lineno, record))
            else:
                raise GraphFormatError(f"unknown record kind {kind!r} on line {lineno}")
        except KeyError as exc:
            raise GraphFormatError(f"missing field {exc} on line {lineno}") from exc
    if graph is None:
        raise GraphFormatError("empty stream: no header record")
    for lineno, record in pending_edges:
        eid, fid = record["entity"], record["factor"]
        if eid not in graph.entities or fid not in graph.factors:
            raise GraphIntegrityError(
                f"dangling edge ({eid!r}, {fid!r}) on line {lineno} references an unknown node"
            )
        key = (eid, fid)
        if key in graph.edges:
            raise GraphIntegrityError(f"duplicate edge ({eid!r}, {fid!r}) on line {lineno}")
        graph.edges[key] = Edge(
            entity=eid,
            factor=fid,
            multiplicity=record.get("multiplicity", 1),
            confidence=record.get("confidence"),
        )
    graph.validate()
    return graph


def save_graph(graph: ReasoningFactorGraph, path) -> None:
    with open(path, "wb") as fh:
        serialize_graph(graph, fh)


def load_graph(path) -> ReasoningFactorGraph:
    with open(path, "rb") as fh:
        return deserialize_graph(fh)


def graph_digest(graph: ReasoningFactorGraph) -> str:
    """Content digest of the serialized graph; used as its version tag."""
    import io

    buf = io.BytesIO()
    serialize_graph(graph, buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()


# -- statistics -----------------------------------------------------------


@dataclass
class GraphStats:
    """Structural counts plus the per-entity-kind in-group similarity."""

    stage: str
    nodes_per_subset: dict[str, int]
    edges_per_class: dict[str, int]
    entity_counts: dict[str, int]
    total_factors: int
    total_edges: int
    total_multiplicity: int
    orphan_factors: int
    in_group_similarity: dict[str, float | None]

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "nodes_per_subset": self.nodes_per_subset,
            "edges_per_class": self.edges_per_class,
            "entity_counts": self.entity_counts,
            "total_factors": self.total_factors,
            "total_edges": self.total_edges,
            "total_multiplicity": self.total_multiplicity,
            "orphan_factors": self.orphan_factors,
            "in_group_similarity": self.in_group_similarity,
        }


def _mean_pairwise_cosine(vectors: np.ndarray) -> float:
    """Mean cosine over unordered distinct pairs of the given row vectors."""
    norms = np.linalg.norm(vectors, axis=1)
    unit = vectors / norms[:, None]
    k = unit.shape[0]
    total = unit.sum(axis=0)
    return float((total @ total - k) / (k * (k - 1)))


def compute_graph_stats(
    graph: ReasoningFactorGraph, factor_embeddings: Mapping[str, np.ndarray]
) -> GraphStats:
    """Count nodes/edges per subset and compute in-group similarity.

    For each entity node, subsets with at least two connected factors
    contribute the mean cosine over unordered distinct factor pairs; these
    are averaged over qualifying subsets, then over entities with at least
    one qualifying subset. Normalizing by the pair count (rather than the
    factor count) keeps the statistic a true mean in [-1, 1].
    """
    nodes_per_subset: dict[str, int] = {}
    for node in graph.factors.values():
        nodes_per_subset[node.subset.key] = nodes_per_subset.get(node.subset.key, 0) + 1

    edges_per_class: dict[str, int] = {}
    per_entity_subset: dict[str, dict[str, list[str]]] = {}
    for (eid, fid), edge in graph.edges.items():
        kind = graph.entities[eid].kind
        subset_key = graph.factors[fid].subset.key
        cls = f"{kind}:{subset_key}"
        edges_per_class[cls] = edges_per_class.get(cls, 0) + 1
        per_entity_subset.setdefault(eid, {}).setdefault(subset_key, []).append(fid)

    unit_cache: dict[str, np.ndarray] = {}

    def embedding_of(fid: str) -> np.ndarray:
        vec = unit_cache.get(fid)
        if vec is not None:
            return vec
        raw = factor_embeddings.get(fid)
        if raw is None:
            raise GraphStatsError(f"missing embedding for factor {fid!r}")
        arr = np.asarray(raw, dtype=np.float64)
        if not np.any(arr):
            raise GraphStatsError(f"zero embedding for factor {fid!r}: cosine undefined")
        unit_cache[fid] = arr
        return arr

    in_group: dict[str, float | None] = {}
    for kind in ENTITY_KINDS:
        node_values: list[float] = []
        for ent in graph.entities_of_kind(kind):
            subset_values: list[float] = []
            for subset_key in sorted(per_entity_subset.get(ent.id, {})):
                fids = sorted(per_entity_subset[ent.id][subset_key])
                if len(fids) < 2:
                    continue
                vectors = np.stack([embedding_of(fid) for fid in fids])
                subset_values.append(_mean_pairwise_cosine(vectors))
            if subset_values:
                node_values.append(float(np.mean(subset_values)))
        in_group[kind] = float(np.mean(node_values)) if node_values else None

    connected = graph.connected_factor_ids()
    return GraphStats(
        stage=graph.stage,
        nodes_per_subset=dict(sorted(nodes_per_subset.items())),
        edges_per_class=dict(sorted(edges_per_class.items())),
        entity_counts={k: len(graph.entities_of_kind(k)) for k in ENTITY_KINDS},
        total_factors=len(graph.factors),
        total_edges=len(graph.edges),
        total_multiplicity=graph.total_multiplicity(),
        orphan_factors=len(graph.factors) - len(connected),
        in_group_similarity=in_group,
    )
