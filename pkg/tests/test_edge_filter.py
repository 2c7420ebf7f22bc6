import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecare.edge_filter import FilterError, FilterPolicy, filter_graph, score_edge, score_graph_edges
from ecare.extraction import DEFAULT_FEATURE_SCHEMA
from ecare.graph import FactorSubsetId, ReasoningFactorGraph
from ecare.prompts import TemplateRegistry
from ecare.providers import ScriptedProvider

from conftest import fixture_record, random_graph, write_fixture

FULL_SCHEMA = [(s.name, s.description) for s in DEFAULT_FEATURE_SCHEMA]


class TestPolicy:
    def test_defaults_apply(self):
        policy = FilterPolicy()
        assert policy.threshold_for("query:need:need") == 0.2
        assert policy.top_k_for("query:need:need") == 2

    def test_overrides(self):
        policy = FilterPolicy(thresholds={"query:need:need": 0.5}, top_k={"query:need:need": 1})
        assert policy.threshold_for("query:need:need") == 0.5
        assert policy.top_k_for("product:need:need") == 2

    def test_threshold_range_validated(self):
        with pytest.raises(FilterError):
            FilterPolicy(default_threshold=1.5)

    def test_top_k_positive(self):
        with pytest.raises(FilterError):
            FilterPolicy(top_k={"query:need:need": 0})


class TestScoreEdge:
    def _graph_one_edge(self):
        graph = ReasoningFactorGraph()
        graph.add_entity("query", "q:1", "red running shoes")
        fid = graph.get_or_create_factor(FactorSubsetId.utility("who"), "runner").id
        graph.add_edge("q:1", fid)
        return graph, ("q:1", fid)

    def test_confidence_is_yes_minus_no(self, tmp_path):
        graph, key = self._graph_one_edge()
        registry = TemplateRegistry(FULL_SCHEMA, ["who"])
        prompt = registry.render(
            "filter_query_utility_who", {"query": "red running shoes", "factor": "runner"}
        )
        path = tmp_path / "fx.jsonl"
        write_fixture(path, [fixture_record(prompt, text="YES", yes=0.9, no=0.05)])
        provider = ScriptedProvider(str(path))
        score = score_edge(graph.edges[key], graph, provider, registry)
        assert score == pytest.approx(0.85)

    def test_symmetric_probabilities_give_zero(self, tmp_path):
        graph, key = self._graph_one_edge()
        registry = TemplateRegistry(FULL_SCHEMA, ["who"])
        prompt = registry.render(
            "filter_query_utility_who", {"query": "red running shoes", "factor": "runner"}
        )
        path = tmp_path / "fx.jsonl"
        write_fixture(path, [fixture_record(prompt, text="?", yes=0.5, no=0.5)])
        score = score_edge(graph.edges[key], graph, ScriptedProvider(str(path)), registry)
        assert score == pytest.approx(0.0)

    def test_oracle_true_and_false_edges(self, small_oracle):
        params = small_oracle.params
        world = small_oracle.world
        registry = TemplateRegistry(
            [(s.name, s.description) for s in DEFAULT_FEATURE_SCHEMA], list(params.scopes)
        )
        graph = ReasoningFactorGraph()
        graph.add_entity("query", "q:x", world.query_texts[0])
        profile = world.profile_of_query(0)
        subset = FactorSubsetId.utility("who")
        true_fid = graph.get_or_create_factor(
            subset, world.canonical_text("utility:who", profile.utilities["who"])
        ).id
        wrong_latent = (profile.utilities["who"] + 3) % params.latents_per_subset
        false_fid = graph.get_or_create_factor(
            subset, world.canonical_text("utility:who", wrong_latent)
        ).id
        graph.add_edge("q:x", true_fid)
        graph.add_edge("q:x", false_fid)
        true_score = score_edge(graph.edges[("q:x", true_fid)], graph, small_oracle, registry)
        false_score = score_edge(graph.edges[("q:x", false_fid)], graph, small_oracle, registry)
        assert true_score >= 0.8
        assert false_score <= -0.8


def brute_force_filter(graph, scores, policy):
    """Reference implementation: sort and slice per (entity, subset)."""
    from ecare.edge_filter import edge_class

    groups = {}
    for key, edge in graph.edges.items():
        subset = graph.factors[edge.factor].subset
        cls = edge_class(graph.entities[edge.entity].kind, subset)
        if scores[key] < policy.threshold_for(cls):
            continue
        groups.setdefault((edge.entity, subset.key, cls), []).append(key)
    kept = set()
    for (entity_id, subset_key, cls), keys in groups.items():
        ranked = sorted(
            keys, key=lambda k: (-scores[k], -graph.edges[k].multiplicity, k[1])
        )
        kept.update(ranked[: policy.top_k_for(cls)])
    return kept


class TestFilterGraph:
    def test_all_below_threshold_prunes_all_factors(self):
        graph = random_graph(np.random.default_rng(0))
        scores = {key: -1.0 for key in graph.edges}
        out = filter_graph(graph, scores, FilterPolicy())
        assert not out.factors and not out.edges
        assert len(out.entities) == len(graph.entities)

    def test_top_k_by_score(self):
        graph = ReasoningFactorGraph()
        graph.add_entity("query", "q:1", "text")
        subset = FactorSubsetId.need()
        fids = [graph.get_or_create_factor(subset, f"phrase {i}").id for i in range(5)]
        values = [0.9, 0.8, 0.7, 0.6, 0.5]
        scores = {}
        for fid, value in zip(fids, values):
            graph.add_edge("q:1", fid)
            scores[("q:1", fid)] = value
        out = filter_graph(graph, scores, FilterPolicy(default_threshold=0.0, default_top_k=2))
        kept_scores = sorted(edge.confidence for edge in out.edges.values())
        assert kept_scores == [0.8, 0.9]

    def test_uncovered_edge_rejected(self):
        graph = random_graph(np.random.default_rng(1))
        scores = {key: 0.5 for key in list(graph.edges)[:-1]}
        with pytest.raises(FilterError, match="no score"):
            filter_graph(graph, scores, FilterPolicy())

    def test_survivors_carry_confidence_and_meta(self):
        graph = random_graph(np.random.default_rng(2))
        scores = {key: 0.9 for key in graph.edges}
        policy = FilterPolicy(default_top_k=3)
        out = filter_graph(graph, scores, policy)
        assert out.stage == "filtered"
        assert out.meta["filter_policy"] == policy.to_json()
        assert all(edge.confidence == 0.9 for edge in out.edges.values())
        assert "orphan_factors_removed" in out.meta

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_matches_brute_force_reference(self, seed):
        rng = np.random.default_rng(seed)
        graph = random_graph(rng, edge_probability=0.6)
        scores = {key: float(rng.uniform(-1, 1)) for key in graph.edges}
        policy = FilterPolicy(
            default_threshold=float(rng.uniform(-0.5, 0.5)),
            default_top_k=int(rng.integers(1, 4)),
        )
        out = filter_graph(graph, scores, policy)
        assert set(out.edges) == brute_force_filter(graph, scores, policy)

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(min_value=0, max_value=10_000),
        st.floats(min_value=0.0, max_value=0.4),
        st.integers(min_value=1, max_value=3),
    )
    def test_monotonicity_in_policy(self, seed, bump, k_drop):
        rng = np.random.default_rng(seed)
        graph = random_graph(rng, edge_probability=0.6)
        scores = {key: float(rng.uniform(-1, 1)) for key in graph.edges}
        base = FilterPolicy(default_threshold=0.0, default_top_k=3)
        stricter = FilterPolicy(default_threshold=bump, default_top_k=max(1, 3 - k_drop + 1))
        strictest = FilterPolicy(default_threshold=bump, default_top_k=1)
        n_base = len(filter_graph(graph, scores, base).edges)
        n_strict = len(filter_graph(graph, scores, stricter).edges)
        n_most = len(filter_graph(graph, scores, strictest).edges)
        assert n_base >= n_strict >= n_most

    def test_cap_never_exceeded(self):
        rng = np.random.default_rng(9)
        graph = random_graph(rng, edge_probability=0.9)
        scores = {key: float(rng.uniform(0.3, 1)) for key in graph.edges}
        policy = FilterPolicy(default_threshold=0.0, default_top_k=2)
        out = filter_graph(graph, scores, policy)
        per_group = {}
        for (eid, fid) in out.edges:
            subset = out.factors[fid].subset.key
            per_group[(eid, subset)] = per_group.get((eid, subset), 0) + 1
        assert all(count <= 2 for count in per_group.values())

    def test_confidence_at_least_threshold(self):
        rng = np.random.default_rng(10)
        graph = random_graph(rng, edge_probability=0.7)
        scores = {key: float(rng.uniform(-1, 1)) for key in graph.edges}
        policy = FilterPolicy(default_threshold=0.25)
        out = filter_graph(graph, scores, policy)
        assert all(edge.confidence >= 0.25 for edge in out.edges.values())

    def test_score_graph_edges_covers_everything(self, small_oracle):
        from ecare.extraction import (
            InteractionDataset,
            InteractionRecord,
            build_initial_graph,
            feature_specs_for,
        )
        from ecare.condense import ClusterParams, condense_stage

        params = small_oracle.params
        specs = feature_specs_for(params.feature_types)
        registry = TemplateRegistry(
            [(s.name, s.description) for s in specs], list(params.scopes)
        )
        records = [InteractionRecord(**r) for r in small_oracle.world.interaction_records()[:12]]
        dataset = InteractionDataset(
            records=[r for r in records if r.label == params.positive_label],
            label_vocabulary=(params.positive_label, params.negative_label),
        )
        graph = build_initial_graph(
            dataset, specs, list(params.scopes), small_oracle, registry, "abort"
        )
        condensed = condense_stage(graph, ClusterParams(0.8, 2), small_oracle, small_oracle, registry)
        scores = score_graph_edges(condensed, small_oracle, registry)
        assert set(scores) == set(condensed.edges)
        filtered = filter_graph(condensed, scores, FilterPolicy())
        filtered.validate()
        assert len(filtered.edges) <= len(condensed.edges)
