"""Command-line orchestration of the pipeline and its artifacts.

Every stage reads --config, writes its artifact files plus a JSON run
manifest (config digest, input digests, output digests), and exits 0 on
success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import augment as augment_mod
from . import metrics as metrics_mod
from . import recall as recall_mod
from .condense import condense_stage
from .config import ConfigError, PipelineConfig, load_config
from .edge_filter import filter_graph, score_graph_edges
from .extraction import (
    add_catalog_products,
    build_initial_graph,
    feature_specs_for,
    filter_positive,
    load_catalog,
    load_interactions,
)
from .graph import FactorSubsetId, load_graph, save_graph
from .prompts import TemplateRegistry
from .providers import Provider, make_provider

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class StageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


@dataclass
class StageContext:
    config: PipelineConfig
    provider: Provider
    embedding_provider: Provider
    registry: TemplateRegistry

    @property
    def paths(self):
        return self.config.paths


def make_context(config_path: str) -> StageContext:
    config = load_config(config_path)
    provider = make_provider(config.provider)
    embedding_provider = (
        provider
        if config.embedding_provider is config.provider
        else make_provider(config.embedding_provider)
    )
    specs = feature_specs_for(config.feature_types)
    registry = TemplateRegistry(
        [(spec.name, spec.description) for spec in specs], list(config.scopes)
    )
    return StageContext(
        config=config,
        provider=provider,
        embedding_provider=embedding_provider,
        registry=registry,
    )


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(
    config: PipelineConfig,
    stage: str,
    inputs: dict[str, Path],
    outputs: dict[str, Path],
    extra: dict | None = None,
) -> Path:
    manifest_dir = config.paths.workdir / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "config_digest": config.digest(),
        "inputs": {name: _file_digest(path) for name, path in sorted(inputs.items())},
        "outputs": {name: _file_digest(path) for name, path in sorted(outputs.items())},
    }
    if extra:
        manifest["extra"] = extra
    path = manifest_dir / f"{stage}.manifest.json"
    path.write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return path


def read_manifest(config: PipelineConfig, stage: str) -> dict:
    path = config.paths.workdir / "manifests" / f"{stage}.manifest.json"
    if not path.exists():
        raise StageError(f"missing manifest for stage {stage!r}; run it first")
    return json.loads(path.read_text(encoding="utf-8"))


def verify_artifact_chain(config: PipelineConfig) -> None:
    """Check graph -> adapters -> index version consistency via manifests."""
    paths = config.paths
    filtered_now = _file_digest(paths.graph("filtered"))
    rewired_now = _file_digest(paths.graph("rewired"))
    train_manifest = read_manifest(config, "train-adapters")
    rewire_manifest = read_manifest(config, "rewire-products")
    index_manifest = read_manifest(config, "index")
    expectations = [
        ("train-adapters", train_manifest["inputs"].get("graph_filtered"), filtered_now),
        ("rewire-products", rewire_manifest["inputs"].get("graph_filtered"), filtered_now),
        ("index", index_manifest["inputs"].get("graph_rewired"), rewired_now),
    ]
    for stage, recorded, current in expectations:
        if recorded != current:
            raise StageError(
                f"version mismatch: stage {stage!r} was built from a different graph "
                f"(recorded {recorded}, current {current})"
            )
    index = recall_mod.load_index(paths.index)
    if index.graph_version != rewired_now:
        raise StageError(
            "version mismatch: index graph_version does not match the rewired graph file"
        )


# -- stage implementations ---------------------------------------------------


def _cmd_build_graph(args) -> int:
    ctx = make_context(args.config)
    interactions_path = Path(args.interactions) if args.interactions else ctx.paths.interactions
    if interactions_path is None:
        raise StageError("build-graph requires --interactions (or paths.interactions in config)")
    catalog_path = Path(args.catalog) if args.catalog else ctx.paths.catalog
    specs = feature_specs_for(ctx.config.feature_types)

    dataset = load_interactions(interactions_path, ctx.config.label_vocabulary)
    positive = filter_positive(dataset, set(ctx.config.positive_labels))
    graph = build_initial_graph(
        positive,
        specs,
        list(ctx.config.scopes),
        ctx.provider,
        ctx.registry,
        failure_policy=ctx.config.failure_policy,
    )
    inputs = {"interactions": interactions_path}
    if catalog_path is not None:
        add_catalog_products(
            graph,
            load_catalog(catalog_path),
            specs,
            ctx.provider,
            ctx.registry,
            failure_policy=ctx.config.failure_policy,
        )
        inputs["catalog"] = catalog_path
    graph.validate()
    out = ctx.paths.graph("g0")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out)
    write_manifest(ctx.config, "build-graph", inputs, {"graph_g0": out})
    log.info("g0: %d factors, %d edges", len(graph.factors), len(graph.edges))
    return 0


def _cmd_cluster(args) -> int:
    ctx = make_context(args.config)
    src = ctx.paths.graph("g0")
    graph = load_graph(src)
    condensed = condense_stage(
        graph, ctx.config.clustering, ctx.provider, ctx.embedding_provider, ctx.registry
    )
    condensed.validate()
    out = ctx.paths.graph("condensed")
    save_graph(condensed, out)
    write_manifest(ctx.config, "cluster", {"graph_g0": src}, {"graph_condensed": out})
    log.info("condensed: %d factors, %d edges", len(condensed.factors), len(condensed.edges))
    return 0


def _cmd_filter(args) -> int:
    ctx = make_context(args.config)
    src = ctx.paths.graph("condensed")
    graph = load_graph(src)
    scores = score_graph_edges(graph, ctx.provider, ctx.registry)
    filtered = filter_graph(graph, scores, ctx.config.filtering)
    filtered.validate()
    out = ctx.paths.graph("filtered")
    save_graph(filtered, out)
    scores_path = ctx.paths.workdir / "edge_scores.jsonl"
    with open(scores_path, "w", encoding="utf-8") as fh:
        for (eid, fid), score in sorted(scores.items()):
            fh.write(
                json.dumps(
                    {"entity": eid, "factor": fid, "score": score},
                    ensure_ascii=False,
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )
    write_manifest(
        ctx.config,
        "filter",
        {"graph_condensed": src},
        {"graph_filtered": out, "edge_scores": scores_path},
    )
    log.info("filtered: %d factors, %d edges", len(filtered.factors), len(filtered.edges))
    return 0


def _reasoning_subset_keys(graph) -> list[str]:
    return [s.key for s in graph.subsets() if s.kind in ("need", "utility")]


def _cmd_train_adapters(args) -> int:
    ctx = make_context(args.config)
    src = ctx.paths.graph("filtered")
    graph = load_graph(src)
    memo = adapter_mod.EmbedMemo(ctx.embedding_provider.embed)

    outputs: dict[str, Path] = {}
    reports = []
    plans = [("query", s.key) for s in graph.subsets()]
    plans += [("product", key) for key in _reasoning_subset_keys(graph)]
    for entity_kind, subset_key in plans:
        subset = FactorSubsetId.from_key(subset_key)
        model, report = adapter_mod.train_adapter(
            graph, subset, entity_kind, ctx.config.adapter[entity_kind], memo
        )
        path = ctx.paths.adapter(entity_kind, subset_key)
        path.parent.mkdir(parents=True, exist_ok=True)
        adapter_mod.save_adapter(model, path)
        outputs[f"adapter_{entity_kind}_{subset_key}"] = path
        reports.append(report)
        log.info(
            "trained %s/%s: eval s1 %.3f -> %.3f",
            entity_kind,
            subset_key,
            report["eval_s1_initial"],
            report["eval_s1_best"],
        )

    cache_entries = {
        node.id: memo([node.text])[0] for node in graph.factors.values()
    }
    adapter_mod.save_embedding_cache(ctx.paths.embedding_cache, cache_entries)
    outputs["embedding_cache"] = ctx.paths.embedding_cache

    report_path = ctx.paths.training_report
    report_path.write_text(
        json.dumps(reports, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    outputs["training_report"] = report_path
    write_manifest(ctx.config, "train-adapters", {"graph_filtered": src}, outputs)
    return 0


def _load_adapters(config: PipelineConfig, graph, entity_kind: str, subset_keys) -> dict:
    adapters = {}
    for key in subset_keys:
        path = config.paths.adapter(entity_kind, key)
        if not path.exists():
            raise StageError(f"missing adapter file {path}; run train-adapters")
        adapters[key] = adapter_mod.load_adapter(path, entity_kind)
    return adapters


def _cmd_rewire_products(args) -> int:
    ctx = make_context(args.config)
    src = ctx.paths.graph("filtered")
    graph = load_graph(src)
    reasoning_keys = _reasoning_subset_keys(graph)
    product_adapters = _load_adapters(ctx.config, graph, "product", reasoning_keys)
    cache = adapter_mod.load_embedding_cache(ctx.paths.embedding_cache)
    memo = adapter_mod.EmbedMemo(ctx.embedding_provider.embed)
    rewired = adapter_mod.rewire_product_edges(
        graph, product_adapters, ctx.config.factors_per_subset, memo, cache
    )
    rewired.validate()
    out = ctx.paths.graph("rewired")
    save_graph(rewired, out)
    write_manifest(
        ctx.config,
        "rewire-products",
        {"graph_filtered": src, "embedding_cache": ctx.paths.embedding_cache},
        {"graph_rewired": out},
    )
    log.info("rewired: %d edges", len(rewired.edges))
    return 0


def _cmd_index(args) -> int:
    ctx = make_context(args.config)
    stage = args.stage
    src = ctx.paths.graph(stage)
    graph = load_graph(src)
    index = recall_mod.build_index(graph)
    recall_mod.save_index(index, ctx.paths.index)
    write_manifest(
        ctx.config, "index", {f"graph_{stage}": src}, {"index": ctx.paths.index}
    )
    log.info("index: %d posting lists over %d products", len(index.postings), index.product_count)
    return 0


@dataclass
class _RecallRuntime:
    config: PipelineConfig
    graph: object
    adapters: dict
    factor_space: dict
    index: recall_mod.RecallIndex
    embedding_provider: Provider


def load_recall_runtime(ctx: StageContext, verify: bool = True) -> _RecallRuntime:
    if verify:
        verify_artifact_chain(ctx.config)
    graph = load_graph(ctx.paths.graph("rewired"))
    cache = adapter_mod.load_embedding_cache(ctx.paths.embedding_cache)
    adapters = _load_adapters(ctx.config, graph, "query", [s.key for s in graph.subsets()])
    factor_space = adapter_mod.build_factor_space(graph, cache)
    index = recall_mod.load_index(ctx.paths.index)
    return _RecallRuntime(
        config=ctx.config,
        graph=graph,
        adapters=adapters,
        factor_space=factor_space,
        index=index,
        embedding_provider=ctx.embedding_provider,
    )


def recall_for_query(runtime: _RecallRuntime, query_text: str, k: int) -> list[dict]:
    predictions = adapter_mod.predict_factors(
        runtime.adapters,
        query_text,
        runtime.config.factors_per_subset,
        runtime.embedding_provider.embed,
        runtime.factor_space,
    )
    union = adapter_mod.predicted_factor_union(predictions)
    results = recall_mod.recall(runtime.index, union, k)
    return [
        {"product_id": r.product_id, "score": r.score, "matched_factors": r.matched_factors}
        for r in results
    ]


def _cmd_recall(args) -> int:
    ctx = make_context(args.config)
    runtime = load_recall_runtime(ctx)
    results = recall_for_query(runtime, args.query, args.k)
    print(json.dumps(results, ensure_ascii=False))
    return 0


def _cmd_eval_recall(args) -> int:
    ctx = make_context(args.config)
    qrels_path = Path(args.qrels) if args.qrels else ctx.paths.qrels
    if qrels_path is None:
        raise StageError("eval-recall requires --qrels (or paths.qrels in config)")
    runtime = load_recall_runtime(ctx)
    k = args.k or ctx.config.recall_k

    products = [
        (ent.id, f"{ent.text} {ent.description}".strip())
        for ent in runtime.graph.entities_of_kind("product")
    ]
    rng = np.random.default_rng(0)
    rows = []
    with open(qrels_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))

    recalls, precisions = [], []
    lex_recalls, rnd_recalls = [], []
    for row in rows:
        relevant = {f"p:{pid}" for pid in row["relevant"]}
        ranked = [r["product_id"] for r in recall_for_query(runtime, row["query"], k)]
        r_at_k, p_at_k = metrics_mod.recall_precision_at_k(ranked, relevant, k)
        recalls.append(r_at_k)
        precisions.append(p_at_k)
        lex = metrics_mod.lexical_overlap_ranking(row["query"], products, k)
        lex_recalls.append(metrics_mod.recall_precision_at_k(lex, relevant, k)[0])
        rnd = metrics_mod.random_ranking([pid for pid, _ in products], k, rng)
        rnd_recalls.append(metrics_mod.recall_precision_at_k(rnd, relevant, k)[0])

    report = {
        "k": k,
        "queries": len(rows),
        "recall_at_k": float(np.mean(recalls)),
        "precision_at_k": float(np.mean(precisions)),
        "lexical_recall_at_k": float(np.mean(lex_recalls)),
        "random_recall_at_k": float(np.mean(rnd_recalls)),
    }
    out = ctx.paths.workdir / "recall_eval.json"
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    write_manifest(ctx.config, "eval-recall", {"qrels": qrels_path}, {"recall_eval": out})
    print(json.dumps(report, sort_keys=True))
    return 0


def _product_factor_texts(graph, entity_id: str, per_subset: int) -> dict[str, list[str]]:
    factors: dict[str, list[tuple[float, int, str]]] = {}
    for edge in graph.edges_of_entity(entity_id):
        node = graph.factors[edge.factor]
        conf = edge.confidence if edge.confidence is not None else 0.0
        factors.setdefault(node.subset.key, []).append((-conf, -edge.multiplicity, node.text))
    out: dict[str, list[str]] = {}
    for key in sorted(factors):
        ranked = sorted(factors[key])
        out[key] = [text for _, _, text in ranked[:per_subset]]
    return out


def _augment_rows(ctx: StageContext, runtime: _RecallRuntime, records) -> list[dict]:
    template = ctx.config.augmentation
    per_subset = ctx.config.factors_per_subset
    rows = []
    query_cache: dict[str, dict[str, list[str]]] = {}
    for record in records:
        if record.query not in query_cache:
            predictions = adapter_mod.predict_factors(
                runtime.adapters,
                record.query,
                per_subset,
                runtime.embedding_provider.embed,
                runtime.factor_space,
            )
            query_cache[record.query] = {
                key: [runtime.graph.factors[fid].text for fid, _ in ranked]
                for key, ranked in predictions.items()
            }
        query_factors = query_cache[record.query]
        entity_id = f"p:{record.product_id}"
        if entity_id in runtime.graph.entities:
            product_factors = _product_factor_texts(runtime.graph, entity_id, per_subset)
        else:
            product_factors = {}
        rows.append(
            {
                "query_id": record.query_id,
                "product_id": record.product_id,
                "augmented_query": augment_mod.compose_augmentation(
                    record.query, query_factors, template
                ),
                "augmented_product": augment_mod.augment_product(
                    record.product_title, record.product_description, product_factors, template
                ),
                "label": record.label,
            }
        )
    return rows


def _cmd_augment(args) -> int:
    ctx = make_context(args.config)
    interactions_path = Path(args.interactions) if args.interactions else ctx.paths.interactions
    if interactions_path is None:
        raise StageError("augment requires --interactions (or paths.interactions in config)")
    runtime = load_recall_runtime(ctx)
    dataset = load_interactions(interactions_path, ctx.config.label_vocabulary)
    rows = _augment_rows(ctx, runtime, dataset.records)
    out = Path(args.output) if args.output else ctx.paths.workdir / "augmented.jsonl"
    augment_mod.export_augmented_dataset(rows, out)
    write_manifest(ctx.config, "augment", {"interactions": interactions_path}, {"augmented": out})
    log.info("augmented %d rows -> %s", len(rows), out)
    return 0


def _cmd_eval_relevance(args) -> int:
    ctx = make_context(args.config)
    train_path = Path(args.train) if args.train else ctx.paths.interactions
    if train_path is None:
        raise StageError("eval-relevance requires --train (or paths.interactions in config)")
    runtime = load_recall_runtime(ctx)
    train_set = load_interactions(train_path, ctx.config.label_vocabulary)
    if args.test:
        test_set = load_interactions(Path(args.test), ctx.config.label_vocabulary)
        train_records, test_records = train_set.records, test_set.records
    else:
        rng = np.random.default_rng(ctx.config.relevance_head.seed)
        order = rng.permutation(len(train_set.records))
        cut = max(1, int(len(order) * 0.8))
        train_records = [train_set.records[i] for i in order[:cut]]
        test_records = [train_set.records[i] for i in order[cut:]] or train_records

    train_rows = _augment_rows(ctx, runtime, train_records)
    test_rows = _augment_rows(ctx, runtime, test_records)
    head = augment_mod.train_relevance_head(
        [(r["augmented_query"], r["augmented_product"], r["label"]) for r in train_rows],
        ctx.config.relevance_head,
        runtime.embedding_provider.embed,
    )
    predictions, truths = [], []
    for row in test_rows:
        _, label = augment_mod.classify_relevance(
            head, row["augmented_query"], row["augmented_product"], runtime.embedding_provider.embed
        )
        predictions.append(label)
        truths.append(row["label"])
    macro, micro, per_class = metrics_mod.f1_scores(
        predictions, truths, ctx.config.label_vocabulary
    )
    report = {
        "macro_f1": macro,
        "micro_f1": micro,
        "per_class_f1": per_class,
        "train_rows": len(train_rows),
        "test_rows": len(test_rows),
    }
    out = ctx.paths.workdir / "relevance_eval.json"
    out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    write_manifest(ctx.config, "eval-relevance", {"train": train_path}, {"relevance_eval": out})
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_stats(args) -> int:
    ctx = make_context(args.config)
    stages = args.stages or [
        name for name in metrics_mod.STAGE_ORDER if ctx.paths.graph(name).exists()
    ]
    if len(stages) < 2:
        raise StageError("stats requires at least two stage graphs")
    stage_graphs = [(name, load_graph(ctx.paths.graph(name))) for name in stages]
    report = metrics_mod.pipeline_report(
        stage_graphs, ctx.embedding_provider.embed, strict=not args.no_strict
    )
    out = ctx.paths.workdir / "stats_report.json"
    out.write_text(json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    write_manifest(
        ctx.config,
        "stats",
        {f"graph_{name}": ctx.paths.graph(name) for name in stages},
        {"stats_report": out},
    )
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def _cmd_serve(args) -> int:
    from .service import serve_recall

    ctx = make_context(args.config)
    port = args.port if args.port is not None else ctx.config.service_port
    serve_recall(ctx, port)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="ecare", description="Reasoning factor graph pipeline")
    sub = parser.add_subparsers(dest="command")

    def stage(name: str, func, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.set_defaults(func=func)
        return p

    p = stage("build-graph", _cmd_build_graph, "stage 1: assemble the initial graph")
    p.add_argument("--interactions", help="interactions JSONL path")
    p.add_argument("--catalog", help="optional product catalog JSONL for cold products")

    stage("cluster", _cmd_cluster, "stage 2: cluster and summarize factors")
    stage("filter", _cmd_filter, "stage 3: score and filter edges")
    stage("train-adapters", _cmd_train_adapters, "train query/product adapters")
    stage("rewire-products", _cmd_rewire_products, "replace product need/utility edges")

    p = stage("index", _cmd_index, "build the factor-to-product recall index")
    p.add_argument("--stage", default="rewired", choices=["filtered", "rewired"])

    p = stage("recall", _cmd_recall, "overlap-count recall for one query")
    p.add_argument("--query", required=True)
    p.add_argument("-k", type=int, default=5)

    p = stage("eval-recall", _cmd_eval_recall, "recall/precision@k over a qrels file")
    p.add_argument("--qrels", help="qrels JSONL path")
    p.add_argument("-k", type=int, default=None)

    p = stage("augment", _cmd_augment, "write factor-augmented pair text")
    p.add_argument("--interactions", help="interactions JSONL path")
    p.add_argument("--output", help="output JSONL path")

    p = stage("eval-relevance", _cmd_eval_relevance, "train/evaluate the relevance head")
    p.add_argument("--train", help="labeled interactions JSONL")
    p.add_argument("--test", help="held-out labeled interactions JSONL")

    p = stage("stats", _cmd_stats, "cross-stage graph statistics report")
    p.add_argument("--stages", nargs="*", help="stage names in pipeline order")
    p.add_argument("--no-strict", action="store_true", help="flag violations instead of failing")

    p = stage("serve", _cmd_serve, "HTTP recall/factor service")
    p.add_argument("--port", type=int, default=None)

    return parser


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # -h/--help
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error in stage {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command(sys.argv[1:]))
