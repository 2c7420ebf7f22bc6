import json

import pytest

from ecare.cli import run_command
from ecare.graph import load_graph
from ecare.oracle import OracleWorldParams

from conftest import make_pipeline_workspace

CLI_WORLD = OracleWorldParams(
    n_queries=8,
    n_products=60,
    group_size=4,
    latents_per_subset=10,
    surface_forms=3,
    embedding_dim=48,
    decoy_rate=0.4,
)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli-pipeline")
    config_path = make_pipeline_workspace(base, CLI_WORLD, seed=29)
    stages = [
        ["build-graph", "--config", config_path],
        ["cluster", "--config", config_path],
        ["filter", "--config", config_path],
        ["train-adapters", "--config", config_path],
        ["rewire-products", "--config", config_path],
        ["index", "--config", config_path],
    ]
    for argv in stages:
        assert run_command(argv) == 0, f"stage {argv[0]} failed"
    return base, config_path


class TestUsage:
    def test_unknown_subcommand_exits_one(self, capsys):
        assert run_command(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand_exits_one(self, capsys):
        assert run_command([]) == 1

    def test_missing_config_flag_exits_one(self):
        assert run_command(["build-graph"]) == 1

    def test_runtime_error_exits_two(self, tmp_path, capsys):
        config_path = make_pipeline_workspace(tmp_path, CLI_WORLD, seed=29)
        # cluster before build-graph: the g0 artifact is missing
        assert run_command(["cluster", "--config", config_path]) == 2
        assert "error in stage cluster" in capsys.readouterr().err


class TestStages:
    def test_stage_artifacts_exist(self, pipeline):
        base, config_path = pipeline
        art = base / "artifacts"
        for name in ("graph_g0", "graph_condensed", "graph_filtered", "graph_rewired"):
            assert (art / f"{name}.jsonl").exists()
        assert (art / "index.jsonl").exists()
        assert (art / "factors.eceb").exists()
        assert (art / "training_report.json").exists()
        assert (art / "edge_scores.jsonl").exists()

    def test_manifests_written_with_digests(self, pipeline):
        base, _ = pipeline
        manifest = json.loads(
            (base / "artifacts" / "manifests" / "index.manifest.json").read_text()
        )
        assert manifest["stage"] == "index"
        assert "graph_rewired" in manifest["inputs"]
        assert len(manifest["config_digest"]) == 64

    def test_stage_tags_and_shrinkage(self, pipeline):
        base, _ = pipeline
        art = base / "artifacts"
        g0 = load_graph(art / "graph_g0.jsonl")
        condensed = load_graph(art / "graph_condensed.jsonl")
        filtered = load_graph(art / "graph_filtered.jsonl")
        assert (g0.stage, condensed.stage, filtered.stage) == ("g0", "condensed", "filtered")
        assert len(condensed.factors) <= len(g0.factors)
        assert len(filtered.factors) <= len(condensed.factors)
        assert "cluster_params" in condensed.meta
        assert "filter_policy" in filtered.meta

    def test_recall_prints_json_array(self, pipeline, capsys):
        base, config_path = pipeline
        qrels = [
            json.loads(line)
            for line in (base / "data" / "qrels.jsonl").read_text().splitlines()
        ]
        assert run_command(
            ["recall", "--config", config_path, "--query", qrels[0]["query"], "-k", "5"]
        ) == 0
        results = json.loads(capsys.readouterr().out)
        assert isinstance(results, list) and len(results) <= 5
        assert {"product_id", "score", "matched_factors"} <= set(results[0])

    def test_eval_recall_reports_metrics(self, pipeline, capsys):
        base, config_path = pipeline
        assert run_command(["eval-recall", "--config", config_path]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["queries"] == CLI_WORLD.n_queries
        assert 0.0 <= report["recall_at_k"] <= 1.0
        assert (base / "artifacts" / "recall_eval.json").exists()

    def test_augment_writes_rows(self, pipeline):
        base, config_path = pipeline
        out = base / "artifacts" / "augmented.jsonl"
        assert run_command(["augment", "--config", config_path]) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert rows
        sample = rows[0]
        assert set(sample) == {
            "query_id",
            "product_id",
            "augmented_query",
            "augmented_product",
            "label",
        }
        assert "[" in sample["augmented_query"]

    def test_eval_relevance_reports_f1(self, pipeline, capsys):
        base, config_path = pipeline
        assert run_command(["eval-relevance", "--config", config_path]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert set(report) >= {"macro_f1", "micro_f1", "per_class_f1"}
        assert 0.0 <= report["macro_f1"] <= 1.0

    def test_stats_reports_pipeline(self, pipeline, capsys):
        base, config_path = pipeline
        assert run_command(["stats", "--config", config_path]) == 0
        report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert report["stages"] == ["g0", "condensed", "filtered", "rewired"]
        assert (base / "artifacts" / "stats_report.json").exists()

    def test_version_mismatch_detected(self, pipeline, tmp_path, capsys):
        base, config_path = pipeline
        art = base / "artifacts"
        rewired = art / "graph_rewired.jsonl"
        original = rewired.read_bytes()
        try:
            # tamper: swap the rewired graph with the filtered one
            rewired.write_bytes((art / "graph_filtered.jsonl").read_bytes())
            code = run_command(
                ["recall", "--config", config_path, "--query", "anything", "-k", "3"]
            )
            assert code == 2
            assert "version mismatch" in capsys.readouterr().err
        finally:
            rewired.write_bytes(original)


class TestDeterminism:
    def test_two_runs_byte_identical_artifacts(self, tmp_path):
        outputs = []
        for run in ("one", "two"):
            base = tmp_path / run
            base.mkdir()
            config_path = make_pipeline_workspace(base, CLI_WORLD, seed=29)
            for stage in ("build-graph", "cluster", "filter", "train-adapters", "rewire-products", "index"):
                assert run_command([stage, "--config", config_path]) == 0
            art = base / "artifacts"
            blobs = {
                "g0": (art / "graph_g0.jsonl").read_bytes(),
                "condensed": (art / "graph_condensed.jsonl").read_bytes(),
                "filtered": (art / "graph_filtered.jsonl").read_bytes(),
                "rewired": (art / "graph_rewired.jsonl").read_bytes(),
                "index": (art / "index.jsonl").read_bytes(),
                "cache": (art / "factors.eceb").read_bytes(),
                "adapters": {
                    p.relative_to(art).as_posix(): p.read_bytes()
                    for p in sorted(art.glob("adapters/**/*.ecad"))
                },
            }
            outputs.append(blobs)
        assert outputs[0] == outputs[1]
