import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecare.graph import (
    FactorSubsetId,
    GraphFormatError,
    GraphIntegrityError,
    GraphStatsError,
    ReasoningFactorGraph,
    UnsupportedVersionError,
    compute_graph_stats,
    deserialize_graph,
    graph_digest,
    normalize_text,
    serialize_graph,
)

from conftest import random_graph


def roundtrip(graph):
    buf = io.BytesIO()
    serialize_graph(graph, buf)
    buf.seek(0)
    return deserialize_graph(buf)


def serialize_bytes(graph):
    buf = io.BytesIO()
    serialize_graph(graph, buf)
    return buf.getvalue()


class TestNormalization:
    def test_trim_collapse_lowercase(self):
        assert normalize_text("  Slip   On\tShoes  ") == "slip on shoes"

    def test_empty_after_normalization_rejected(self):
        graph = ReasoningFactorGraph()
        with pytest.raises(GraphIntegrityError):
            graph.get_or_create_factor(FactorSubsetId.need(), "   ")


class TestConstruction:
    def test_factor_key_unique_within_graph(self):
        graph = ReasoningFactorGraph()
        a = graph.get_or_create_factor(FactorSubsetId.need(), "Wedding Decoration")
        b = graph.get_or_create_factor(FactorSubsetId.need(), "wedding   decoration")
        assert a.id == b.id
        assert len(graph.factors) == 1

    def test_same_text_different_subset_distinct(self):
        graph = ReasoningFactorGraph()
        a = graph.get_or_create_factor(FactorSubsetId.feature("category"), "shoes")
        b = graph.get_or_create_factor(FactorSubsetId.feature("style"), "shoes")
        assert a.id != b.id

    def test_bipartite_enforced(self):
        graph = ReasoningFactorGraph()
        graph.add_entity("query", "q:1", "text")
        with pytest.raises(GraphIntegrityError):
            graph.add_edge("q:1", "q:1")

    def test_edge_requires_known_nodes(self):
        graph = ReasoningFactorGraph()
        graph.add_entity("query", "q:1", "text")
        with pytest.raises(GraphIntegrityError):
            graph.add_edge("q:1", "a:need:need:doesnotexist")

    def test_query_description_rejected(self):
        graph = ReasoningFactorGraph()
        with pytest.raises(GraphIntegrityError):
            graph.add_entity("query", "q:1", "text", description="nope")

    def test_duplicate_edge_increments_multiplicity(self):
        graph = ReasoningFactorGraph()
        graph.add_entity("query", "q:1", "text")
        fid = graph.get_or_create_factor(FactorSubsetId.need(), "thing").id
        graph.add_edge("q:1", fid)
        graph.add_edge("q:1", fid)
        assert graph.edges[("q:1", fid)].multiplicity == 2
        assert len(graph.edges) == 1

    def test_need_subset_fixed_tag(self):
        with pytest.raises(GraphIntegrityError):
            FactorSubsetId("need", "other")


class TestSerialization:
    def test_empty_graph_is_header_only(self):
        data = serialize_bytes(ReasoningFactorGraph())
        lines = data.decode().strip().split("\n")
        assert len(lines) == 1
        header = json.loads(lines[0])
        assert header == {
            "kind": "header",
            "format": "ecare-graph",
            "version": 1,
            "stage": "g0",
            "meta": {},
        }

    def test_roundtrip_identity(self):
        graph = random_graph(np.random.default_rng(0), with_confidence=True, stage="filtered")
        graph.meta = {"filter_policy": {"default_top_k": 2}}
        assert roundtrip(graph) == graph

    def test_serialization_is_byte_stable(self):
        graph = random_graph(np.random.default_rng(1))
        assert serialize_bytes(graph) == serialize_bytes(graph)

    def test_minimal_stream(self):
        data = (
            b'{"kind":"header","format":"ecare-graph","version":1,"stage":"g0","meta":{}}\n'
            b'{"kind":"entity","id":"q:1","entity_kind":"query","text":"hello","description":""}\n'
        )
        graph = deserialize_graph(io.BytesIO(data))
        assert len(graph.entities) == 1
        assert not graph.edges

    def test_dangling_edge_rejected(self):
        data = (
            b'{"kind":"header","format":"ecare-graph","version":1}\n'
            b'{"kind":"entity","id":"q:1","entity_kind":"query","text":"hello","description":""}\n'
            b'{"kind":"edge","entity":"q:1","factor":"a:missing","multiplicity":1}\n'
        )
        with pytest.raises(GraphIntegrityError, match="a:missing"):
            deserialize_graph(io.BytesIO(data))

    def test_version_mismatch_rejected(self):
        data = b'{"kind":"header","format":"ecare-graph","version":2}\n'
        with pytest.raises(UnsupportedVersionError):
            deserialize_graph(io.BytesIO(data))

    def test_malformed_line_reports_line_number(self):
        data = (
            b'{"kind":"header","format":"ecare-graph","version":1}\n'
            b'this is not json\n'
        )
        with pytest.raises(GraphFormatError, match="line 2"):
            deserialize_graph(io.BytesIO(data))

    def test_digest_changes_with_content(self):
        g1 = random_graph(np.random.default_rng(2))
        g2 = random_graph(np.random.default_rng(3))
        assert graph_digest(g1) == graph_digest(g1)
        assert graph_digest(g1) != graph_digest(g2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_roundtrip_property(self, seed):
        graph = random_graph(np.random.default_rng(seed), with_confidence=seed % 2 == 0)
        assert roundtrip(graph) == graph


def brute_force_in_group(graph, embeddings, kind):
    """Independent reference: explicit loops over unordered distinct pairs."""
    node_values = []
    for ent in graph.entities_of_kind(kind):
        subset_values = []
        for subset in graph.subsets():
            fids = [e.factor for e in graph.edges_of_entity(ent.id, subset)]
            if len(fids) < 2:
                continue
            sims = []
            for i in range(len(fids)):
                for j in range(i + 1, len(fids)):
                    a, b = embeddings[fids[i]], embeddings[fids[j]]
                    sims.append(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
            subset_values.append(float(np.mean(sims)))
        if subset_values:
            node_values.append(float(np.mean(subset_values)))
    return float(np.mean(node_values)) if node_values else None


class TestStats:
    def _graph_with_vectors(self, vectors):
        graph = ReasoningFactorGraph()
        graph.add_entity("query", "q:1", "text")
        embeddings = {}
        subset = FactorSubsetId.need()
        for i, vec in enumerate(vectors):
            fid = graph.get_or_create_factor(subset, f"phrase {i}").id
            graph.add_edge("q:1", fid)
            embeddings[fid] = np.asarray(vec, dtype=float)
        return graph, embeddings

    def test_identical_vectors_give_one(self):
        graph, emb = self._graph_with_vectors([[1.0, 0.0]] * 3)
        stats = compute_graph_stats(graph, emb)
        assert stats.in_group_similarity["query"] == pytest.approx(1.0)

    def test_orthogonal_vectors_give_zero(self):
        graph, emb = self._graph_with_vectors([[1.0, 0.0], [0.0, 1.0]])
        stats = compute_graph_stats(graph, emb)
        assert stats.in_group_similarity["query"] == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        graph = random_graph(rng, n_queries=5, n_products=5, edge_probability=0.6)
        embeddings = {}
        for fid in graph.factors:
            vec = rng.normal(size=16)
            embeddings[fid] = vec / np.linalg.norm(vec)
        stats = compute_graph_stats(graph, embeddings)
        for kind in ("query", "product"):
            expected = brute_force_in_group(graph, embeddings, kind)
            if expected is None:
                assert stats.in_group_similarity[kind] is None
            else:
                assert stats.in_group_similarity[kind] == pytest.approx(expected, abs=1e-9)

    def test_counts_consistent(self):
        rng = np.random.default_rng(11)
        graph = random_graph(rng)
        embeddings = {
            fid: np.ones(4) for fid in graph.connected_factor_ids()
        }
        stats = compute_graph_stats(graph, embeddings)
        assert sum(stats.nodes_per_subset.values()) == stats.total_factors == len(graph.factors)
        assert sum(stats.edges_per_class.values()) == stats.total_edges == len(graph.edges)
        for value in stats.in_group_similarity.values():
            if value is not None:
                assert -1.0 <= value <= 1.0

    def test_missing_embedding_names_factor(self):
        graph, emb = self._graph_with_vectors([[1.0, 0.0], [0.0, 1.0]])
        missing = next(iter(emb))
        del emb[missing]
        with pytest.raises(GraphStatsError, match=missing):
            compute_graph_stats(graph, emb)

    def test_zero_vector_rejected(self):
        graph, emb = self._graph_with_vectors([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(GraphStatsError, match="zero"):
            compute_graph_stats(graph, emb)

    def test_single_factor_subsets_skipped(self):
        graph, emb = self._graph_with_vectors([[1.0, 0.0]])
        stats = compute_graph_stats(graph, emb)
        assert stats.in_group_similarity["query"] is None
