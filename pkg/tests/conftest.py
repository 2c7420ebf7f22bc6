import json

import numpy as np
import pytest

from ecare.graph import FactorSubsetId, ReasoningFactorGraph
from ecare.oracle import OracleProvider, OracleWorldParams
from ecare.providers import prompt_digest

DEFAULT_SUBSETS = (
    FactorSubsetId.feature("category"),
    FactorSubsetId.need(),
    FactorSubsetId.utility("who"),
)


def random_graph(
    rng: np.random.Generator,
    n_queries: int = 4,
    n_products: int = 6,
    factors_per_subset: int = 5,
    subsets=DEFAULT_SUBSETS,
    edge_probability: float = 0.4,
    with_confidence: bool = False,
    stage: str = "g0",
) -> ReasoningFactorGraph:
    """Small random graph honoring all structural invariants."""
    graph = ReasoningFactorGraph(stage=stage)
    entities = []
    for i in range(n_queries):
        entities.append(graph.add_entity("query", f"q:{i}", f"query text {i}").id)
    for i in range(n_products):
        entities.append(
            graph.add_entity("product", f"p:{i}", f"product title {i}", f"description {i}").id
        )
    factor_ids = []
    for subset in subsets:
        for i in range(factors_per_subset):
            factor_ids.append(graph.get_or_create_factor(subset, f"{subset.tag} phrase {i}").id)
    for eid in entities:
        for fid in factor_ids:
            if rng.random() < edge_probability:
                graph.add_edge(
                    eid,
                    fid,
                    multiplicity=int(rng.integers(1, 4)),
                    confidence=float(rng.uniform(-1, 1)) if with_confidence else None,
                )
    return graph


def write_fixture(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def fixture_record(prompt: str, **fields) -> dict:
    return {"key": prompt_digest(prompt), **fields}


SMALL_WORLD = OracleWorldParams(
    n_queries=8,
    n_products=60,
    group_size=4,
    latents_per_subset=10,
    surface_forms=3,
    embedding_dim=48,
    decoy_rate=0.4,
    irrelevant_per_query=2,
)


@pytest.fixture(scope="session")
def small_oracle() -> OracleProvider:
    return OracleProvider(seed=29, params=SMALL_WORLD)


FAST_ADAPTER = {
    "hidden_dims": [],
    "output_dim": 32,
    "epochs": 60,
    "learning_rate": 1e-2,
    "temperature": 0.15,
    "batch_size": 32,
    "negatives_per_positive": 6,
    "seed": 5,
}


def make_pipeline_workspace(
    base_dir,
    params: OracleWorldParams,
    seed: int = 29,
    adapter_query: dict | None = None,
    adapter_product: dict | None = None,
    extra_config: dict | None = None,
) -> str:
    """Write world datasets plus a ready pipeline config; returns config path."""
    from ecare.oracle import LatentWorld, write_world_files

    base_dir = __import__("pathlib").Path(base_dir)
    world = LatentWorld(seed, params)
    paths = write_world_files(world, base_dir / "data")
    config = {
        "provider": {"kind": "oracle", "seed": seed, "world": params.to_dict()},
        "scopes": list(params.scopes),
        "feature_types": list(params.feature_types),
        "positive_labels": [params.positive_label],
        "label_vocabulary": [params.positive_label, params.negative_label],
        "clustering": {"similarity_threshold": 0.8, "min_community_size": 2},
        "filtering": {"default_threshold": 0.2, "default_top_k": 2},
        "adapter": {
            "query": adapter_query or dict(FAST_ADAPTER),
            "product": adapter_product or dict(FAST_ADAPTER),
        },
        "factors_per_subset": 2,
        "recall_k": 5,
        "paths": {
            "workdir": str(base_dir / "artifacts"),
            "interactions": paths["interactions"],
            "catalog": paths["catalog"],
            "qrels": paths["qrels"],
        },
        "failure_policy": "abort",
    }
    if extra_config:
        config.update(extra_config)
    config_path = base_dir / "config.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return str(config_path)
