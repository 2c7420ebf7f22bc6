"""Pipeline stage 1: positive filtering, feature extraction, need/utility
reasoning, and assembly of the initial reasoning factor graph."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable

from .graph import FactorSubsetId, GraphError, ReasoningFactorGraph, normalize_text
from .prompts import TemplateRegistry
from .providers import Provider, ProviderError

log = logging.getLogger(__name__)

PHRASE_WORD_WARNING = 8


class ExtractionError(Exception):
    """A provider response could not be turned into structured output."""

    def __init__(self, message: str, raw_text: str = "") -> None:
        super().__init__(message)
        self.raw_text = raw_text


class DatasetError(Exception):
    """An interaction dataset violates its contract."""


@dataclass(frozen=True)
class FeatureTypeSpec:
    """One product feature type: a name plus its prompt description."""

    name: str
    description: str


# The full predefined feature-type schema; pipelines typically configure a
# subset of these names.
DEFAULT_FEATURE_SCHEMA: tuple[FeatureTypeSpec, ...] = tuple(
    FeatureTypeSpec(name, f"{name.replace('_', ' ')} of the product.")
    for name in (
        "category",
        "broad_category",
        "target_audience",
        "shape",
        "size",
        "style",
        "color",
        "quantity",
        "material",
        "weight",
        "usage",
        "compatibility",
        "included_accessories",
        "excluded_accessories",
    )
)


def feature_specs_for(names: Iterable[str]) -> list[FeatureTypeSpec]:
    """Resolve feature type names against the predefined schema."""
    by_name = {spec.name: spec for spec in DEFAULT_FEATURE_SCHEMA}
    specs = []
    for name in names:
        spec = by_name.get(name)
        if spec is None:
            raise DatasetError(f"feature type {name!r} is not in the predefined schema")
        specs.append(spec)
    if len({s.name for s in specs}) != len(specs):
        raise DatasetError("feature type names must be unique")
    return specs


@dataclass
class InteractionRecord:
    """One (query, product, label) interaction row."""

    query_id: str
    query: str
    product_id: str
    product_title: str
    product_description: str = ""
    label: str = ""


@dataclass
class InteractionDataset:
    records: list[InteractionRecord]
    label_vocabulary: tuple[str, ...]

    def __post_init__(self) -> None:
        vocab = set(self.label_vocabulary)
        for i, rec in enumerate(self.records):
            if not rec.query_id or not rec.product_id:
                raise DatasetError(f"record {i} has an empty id")
            if rec.label not in vocab:
                raise DatasetError(f"record {i} label {rec.label!r} not in vocabulary {sorted(vocab)}")


def load_interactions(path, label_vocabulary: Iterable[str]) -> InteractionDataset:
    """Read interactions from JSONL with InteractionRecord field names."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                records.append(
                    InteractionRecord(
                        query_id=raw["query_id"],
                        query=raw["query"],
                        product_id=raw["product_id"],
                        product_title=raw["product_title"],
                        product_description=raw.get("product_description", ""),
                        label=raw["label"],
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad interaction record: {exc}") from exc
    return InteractionDataset(records=records, label_vocabulary=tuple(label_vocabulary))


def filter_positive(dataset: InteractionDataset, positive_labels: set[str]) -> InteractionDataset:
    """Keep exactly the records whose label is positive, order preserved."""
    if not positive_labels:
        raise DatasetError("positive_labels must be non-empty")
    kept = [rec for rec in dataset.records if rec.label in positive_labels]
    if not kept:
        log.warning("positive filter removed every record (labels %s)", sorted(positive_labels))
    return InteractionDataset(records=kept, label_vocabulary=dataset.label_vocabulary)


def _product_prompt_text(record: InteractionRecord) -> str:
    if record.product_description:
        return f"{record.product_title}\n{record.product_description}"
    return record.product_title


def extract_product_features(
    record: InteractionRecord,
    feature_types: list[FeatureTypeSpec],
    provider: Provider,
    registry: TemplateRegistry,
) -> dict[str, list[str]]:
    """Extract per-type feature values from a product's text.

    The response is parsed as ``name: value`` segments separated by
    semicolons or newlines; unknown names are dropped with a warning and
    absent types map to empty lists.
    """
    if not record.product_title:
        raise ExtractionError(f"product {record.product_id!r} has an empty title")
    prompt = registry.render("feature_extraction", {"product": _product_prompt_text(record)})
    response = provider.complete(prompt)
    known = {spec.name for spec in feature_types}
    result: dict[str, list[str]] = {spec.name: [] for spec in feature_types}
    parsed_any = False
    for segment in re.split(r"[;\n]+", response.text):
        segment = segment.strip()
        if not segment:
            continue
        name, sep, value = segment.partition(":")
        if not sep:
            continue
        parsed_any = True
        name = name.strip().lower()
        value = value.strip()
        if value.endswith("."):
            value = value[:-1]
        value = normalize_text(value)
        if not value:
            continue
        if name not in known:
            log.warning("product %s: dropping unknown feature name %r", record.product_id, name)
            continue
        if value not in result[name]:
            result[name].append(value)
    if not parsed_any:
        raise ExtractionError(
            f"unparseable extraction response for product {record.product_id!r}",
            raw_text=response.text,
        )
    return result


@dataclass
class NeedUtilityTuple:
    """One mined (need, utility) pair for a query-product interaction."""

    query: str
    need: str
    utility: str
    product: str
    scope: str

    def __post_init__(self) -> None:
        if not self.need or not self.utility:
            raise ExtractionError("need and utility must be non-empty")
        for name, phrase in (("need", self.need), ("utility", self.utility)):
            if len(phrase.split()) > PHRASE_WORD_WARNING:
                log.warning("%s phrase above %d words: %r", name, PHRASE_WORD_WARNING, phrase)


_ANSWER_LINE = re.compile(r"^\s*A\d+\s*:(.*)$")
_BRACKET_SPAN = re.compile(r"\[([^\]]*)\]")


def _serialize_features(features: dict[str, list[str]]) -> str:
    lines = []
    for name in features:
        for value in features[name]:
            lines.append(f"{name}: {value}")
    return "\n".join(lines)


def reason_need_utility(
    record: InteractionRecord,
    features: dict[str, list[str]],
    scope: str,
    provider: Provider,
    registry: TemplateRegistry,
) -> list[NeedUtilityTuple]:
    """Mine up to two (need, utility) tuples for one scope.

    Answer lines embed the utility in the first bracketed span and the need
    in the second; extra answers beyond two are truncated.
    """
    prompt = registry.render(
        f"reasoning_{scope}",
        {
            "query": record.query,
            "product": record.product_title,
            "extraction_response": _serialize_features(features),
        },
    )
    response = provider.complete(prompt)
    tuples: list[NeedUtilityTuple] = []
    for line in response.text.splitlines():
        match = _ANSWER_LINE.match(line)
        if not match:
            continue
        spans = [normalize_text(span) for span in _BRACKET_SPAN.findall(match.group(1))]
        spans = [span for span in spans if span]
        if len(spans) < 2:
            log.warning(
                "record (%s, %s) scope %s: skipping answer without two bracketed spans",
                record.query_id,
                record.product_id,
                scope,
            )
            continue
        tuples.append(
            NeedUtilityTuple(
                query=record.query,
                need=spans[1],
                utility=spans[0],
                product=record.product_id,
                scope=scope,
            )
        )
        if len(tuples) == 2:
            break
    if not tuples:
        log.warning(
            "record (%s, %s) scope %s: no parseable answers", record.query_id, record.product_id, scope
        )
    return tuples


class _FeatureCache:
    """Caches feature extraction per product id: one provider call per product."""

    def __init__(
        self,
        feature_types: list[FeatureTypeSpec],
        provider: Provider,
        registry: TemplateRegistry,
    ) -> None:
        self.feature_types = feature_types
        self.provider = provider
        self.registry = registry
        self._cache: dict[str, dict[str, list[str]]] = {}

    def get(self, record: InteractionRecord) -> dict[str, list[str]]:
        cached = self._cache.get(record.product_id)
        if cached is None:
            cached = extract_product_features(record, self.feature_types, self.provider, self.registry)
            self._cache[record.product_id] = cached
        return cached


def build_initial_graph(
    dataset: InteractionDataset,
    feature_types: list[FeatureTypeSpec],
    scopes: list[str],
    provider: Provider,
    registry: TemplateRegistry,
    failure_policy: str = "skip",
) -> ReasoningFactorGraph:
    """Assemble the initial graph from a positive-filtered dataset.

    Every factor produced from an interaction connects both the query and
    the product; repeated connections increment the edge multiplicity.
    """
    if failure_policy not in ("skip", "abort"):
        raise DatasetError(f"unknown failure policy {failure_policy!r}")
    graph = ReasoningFactorGraph(stage="g0")
    cache = _FeatureCache(feature_types, provider, registry)
    need_subset = FactorSubsetId.need()
    for record in dataset.records:
        try:
            query_node = graph.add_entity("query", f"q:{record.query_id}", record.query)
            product_node = graph.add_entity(
                "product", f"p:{record.product_id}", record.product_title, record.product_description
            )
            features = cache.get(record)
            pair_factors: list[str] = []
            for name in sorted(features):
                subset = FactorSubsetId.feature(name)
                for value in features[name]:
                    pair_factors.append(graph.get_or_create_factor(subset, value).id)
            for scope in scopes:
                for tup in reason_need_utility(record, features, scope, provider, registry):
                    pair_factors.append(graph.get_or_create_factor(need_subset, tup.need).id)
                    pair_factors.append(
                        graph.get_or_create_factor(FactorSubsetId.utility(scope), tup.utility).id
                    )
            for fid in pair_factors:
                graph.add_edge(query_node.id, fid)
                graph.add_edge(product_node.id, fid)
        except (ProviderError, ExtractionError, GraphError) as exc:
            if failure_policy == "abort":
                raise ExtractionError(
                    f"record ({record.query_id}, {record.product_id}): {exc}"
                ) from exc
            log.warning(
                "skipping record (%s, %s): %s", record.query_id, record.product_id, exc
            )
    return graph


def add_catalog_products(
    graph: ReasoningFactorGraph,
    catalog: list[InteractionRecord],
    feature_types: list[FeatureTypeSpec],
    provider: Provider,
    registry: TemplateRegistry,
    failure_policy: str = "skip",
) -> None:
    """Register catalog products that never appeared in interactions.

    Cold products gain feature edges from their own description; need and
    utility edges arrive later through product-adapter rewiring.
    """
    cache = _FeatureCache(feature_types, provider, registry)
    for record in catalog:
        entity_id = f"p:{record.product_id}"
        if entity_id in graph.entities:
            continue
        try:
            node = graph.add_entity(
                "product", entity_id, record.product_title, record.product_description
            )
            features = cache.get(record)
            for name in sorted(features):
                subset = FactorSubsetId.feature(name)
                for value in features[name]:
                    graph.add_edge(node.id, graph.get_or_create_factor(subset, value).id)
        except (ProviderError, ExtractionError, GraphError) as exc:
            if failure_policy == "abort":
                raise ExtractionError(f"catalog product {record.product_id}: {exc}") from exc
            log.warning("skipping catalog product %s: %s", record.product_id, exc)


def load_catalog(path) -> list[InteractionRecord]:
    """Read a product catalog JSONL (product_id/title/description fields)."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                records.append(
                    InteractionRecord(
                        query_id="",
                        query="",
                        product_id=raw["product_id"],
                        product_title=raw["product_title"],
                        product_description=raw.get("product_description", ""),
                        label="",
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path}:{lineno}: bad catalog record: {exc}") from exc
    return records
