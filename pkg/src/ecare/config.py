"""Pipeline configuration: JSON schema, defaults, and validation.

Unknown keys are rejected everywhere (typo protection); absent keys take the
documented defaults. The resolved config has a stable digest used by run
manifests to tie artifacts to the configuration that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adapter import AdapterConfig
from .augment import AugmentationTemplate, HeadConfig, DEFAULT_ORDER, DEFAULT_PHRASES
from .condense import ClusterParams
from .edge_filter import FilterPolicy
from .extraction import feature_specs_for
from .providers import ProviderConfig

DEFAULT_SCOPES = ("where_when", "why", "who")
DEFAULT_FEATURE_TYPES = ("category", "style", "usage")
DEFAULT_LABEL_VOCABULARY = ("Exact", "Substitute", "Complement", "Irrelevant")
DEFAULT_POSITIVE_LABELS = ("Exact",)


class ConfigError(Exception):
    pass


def _take(raw: dict, allowed: set[str], context: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {context}")


def _provider_config(raw: dict, context: str) -> ProviderConfig:
    allowed = {
        "kind",
        "base_url",
        "model_name",
        "api_key_env_name",
        "max_in_flight",
        "timeout_ms",
        "max_retries",
        "seed",
        "fixture_path",
        "world",
    }
    _take(raw, allowed, context)
    if "kind" not in raw:
        raise ConfigError(f"{context}: provider requires a 'kind'")
    try:
        return ProviderConfig(**raw)
    except Exception as exc:
        raise ConfigError(f"{context}: {exc}") from exc


@dataclass
class PathsConfig:
    workdir: Path = Path("artifacts")
    interactions: Path | None = None
    catalog: Path | None = None
    qrels: Path | None = None

    def graph(self, stage: str) -> Path:
        return self.workdir / f"graph_{stage}.jsonl"

    @property
    def adapters_dir(self) -> Path:
        return self.workdir / "adapters"

    def adapter(self, entity_kind: str, subset_key: str) -> Path:
        return self.adapters_dir / entity_kind / (subset_key.replace(":", "_") + ".ecad")

    @property
    def embedding_cache(self) -> Path:
        return self.workdir / "factors.eceb"

    @property
    def index(self) -> Path:
        return self.workdir / "index.jsonl"

    @property
    def training_report(self) -> Path:
        return self.workdir / "training_report.json"

    def to_json(self) -> dict:
        return {
            "workdir": str(self.workdir),
            "interactions": str(self.interactions) if self.interactions else None,
            "catalog": str(self.catalog) if self.catalog else None,
            "qrels": str(self.qrels) if self.qrels else None,
        }


@dataclass
class PipelineConfig:
    provider: ProviderConfig
    embedding_provider: ProviderConfig
    scopes: tuple[str, ...] = DEFAULT_SCOPES
    feature_types: tuple[str, ...] = DEFAULT_FEATURE_TYPES
    positive_labels: tuple[str, ...] = DEFAULT_POSITIVE_LABELS
    label_vocabulary: tuple[str, ...] = DEFAULT_LABEL_VOCABULARY
    clustering: ClusterParams = field(default_factory=ClusterParams)
    filtering: FilterPolicy = field(default_factory=FilterPolicy)
    adapter: dict[str, AdapterConfig] = field(
        default_factory=lambda: {"query": AdapterConfig(), "product": AdapterConfig()}
    )
    relevance_head: HeadConfig = field(default_factory=HeadConfig)
    factors_per_subset: int = 2
    recall_k: int = 5
    augmentation: AugmentationTemplate = field(default_factory=AugmentationTemplate)
    paths: PathsConfig = field(default_factory=PathsConfig)
    failure_policy: str = "skip"
    service_port: int = 8080

    def __post_init__(self) -> None:
        if not self.scopes:
            raise ConfigError("scopes must be non-empty")
        if not self.feature_types:
            raise ConfigError("feature_types must be non-empty")
        feature_specs_for(self.feature_types)
        if not set(self.positive_labels) <= set(self.label_vocabulary):
            raise ConfigError("positive_labels must be a subset of label_vocabulary")
        if self.factors_per_subset < 1 or self.recall_k < 1:
            raise ConfigError("factors_per_subset and recall_k must be positive")
        if self.failure_policy not in ("skip", "abort"):
            raise ConfigError(f"unknown failure_policy {self.failure_policy!r}")
        if set(self.adapter) != {"query", "product"}:
            raise ConfigError("adapter config must define exactly 'query' and 'product'")
        for provider in (self.provider, self.embedding_provider):
            if provider.kind == "oracle" and provider.world:
                world = provider.world
                if tuple(world.get("scopes", self.scopes)) != tuple(self.scopes):
                    raise ConfigError("oracle world scopes must match the pipeline scopes")
                if tuple(world.get("feature_types", self.feature_types)) != tuple(self.feature_types):
                    raise ConfigError("oracle world feature_types must match the pipeline feature_types")

    def to_json(self) -> dict:
        return {
            "provider": _provider_json(self.provider),
            "embedding_provider": _provider_json(self.embedding_provider),
            "scopes": list(self.scopes),
            "feature_types": list(self.feature_types),
            "positive_labels": list(self.positive_labels),
            "label_vocabulary": list(self.label_vocabulary),
            "clustering": {
                "similarity_threshold": self.clustering.similarity_threshold,
                "min_community_size": self.clustering.min_community_size,
            },
            "filtering": self.filtering.to_json(),
            "adapter": {
                kind: _adapter_json(cfg) for kind, cfg in sorted(self.adapter.items())
            },
            "relevance_head": {
                "hidden_dims": list(self.relevance_head.hidden_dims),
                "epochs": self.relevance_head.epochs,
                "learning_rate": self.relevance_head.learning_rate,
                "batch_size": self.relevance_head.batch_size,
                "seed": self.relevance_head.seed,
            },
            "factors_per_subset": self.factors_per_subset,
            "recall_k": self.recall_k,
            "augmentation": {
                "order": list(self.augmentation.order),
                "phrases": dict(sorted(self.augmentation.phrases.items())),
            },
            "paths": self.paths.to_json(),
            "failure_policy": self.failure_policy,
            "service_port": self.service_port,
        }

    def digest(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _provider_json(cfg: ProviderConfig) -> dict:
    return {
        "kind": cfg.kind,
        "base_url": cfg.base_url,
        "model_name": cfg.model_name,
        "api_key_env_name": cfg.api_key_env_name,
        "max_in_flight": cfg.max_in_flight,
        "timeout_ms": cfg.timeout_ms,
        "max_retries": cfg.max_retries,
        "seed": cfg.seed,
        "fixture_path": cfg.fixture_path,
        "world": cfg.world,
    }


def _adapter_json(cfg: AdapterConfig) -> dict:
    return {
        "hidden_dims": list(cfg.hidden_dims),
        "output_dim": cfg.output_dim,
        "negatives_per_positive": cfg.negatives_per_positive,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "seed": cfg.seed,
        "temperature": cfg.temperature,
        "batch_size": cfg.batch_size,
        "eval_fraction": cfg.eval_fraction,
    }


def _parse_config(raw: dict) -> PipelineConfig:
    allowed = {
        "provider",
        "embedding_provider",
        "scopes",
        "feature_types",
        "positive_labels",
        "label_vocabulary",
        "clustering",
        "filtering",
        "adapter",
        "relevance_head",
        "factors_per_subset",
        "recall_k",
        "augmentation",
        "paths",
        "failure_policy",
        "service_port",
    }
    _take(raw, allowed, "config")
    if "provider" not in raw:
        raise ConfigError("config requires a 'provider' section")
    provider = _provider_config(raw["provider"], "provider")
    embedding_provider = (
        _provider_config(raw["embedding_provider"], "embedding_provider")
        if "embedding_provider" in raw
        else provider
    )

    kwargs: dict = {"provider": provider, "embedding_provider": embedding_provider}
    for key in ("scopes", "feature_types", "positive_labels", "label_vocabulary"):
        if key in raw:
            kwargs[key] = tuple(raw[key])

    if "clustering" in raw:
        section = raw["clustering"]
        _take(section, {"similarity_threshold", "min_community_size"}, "clustering")
        try:
            kwargs["clustering"] = ClusterParams(**section)
        except Exception as exc:
            raise ConfigError(f"clustering: {exc}") from exc

    if "filtering" in raw:
        section = raw["filtering"]
        _take(section, {"default_threshold", "default_top_k", "thresholds", "top_k"}, "filtering")
        try:
            kwargs["filtering"] = FilterPolicy(**section)
        except Exception as exc:
            raise ConfigError(f"filtering: {exc}") from exc

    if "adapter" in raw:
        section = raw["adapter"]
        _take(section, {"query", "product"}, "adapter")
        adapters = {}
        for kind in ("query", "product"):
            try:
                adapters[kind] = AdapterConfig.from_dict(section.get(kind, {}))
            except Exception as exc:
                raise ConfigError(f"adapter.{kind}: {exc}") from exc
        kwargs["adapter"] = adapters

    if "relevance_head" in raw:
        try:
            kwargs["relevance_head"] = HeadConfig.from_dict(raw["relevance_head"])
        except Exception as exc:
            raise ConfigError(f"relevance_head: {exc}") from exc

    for key in ("factors_per_subset", "recall_k", "failure_policy", "service_port"):
        if key in raw:
            kwargs[key] = raw[key]

    if "augmentation" in raw:
        section = raw["augmentation"]
        _take(section, {"order", "phrases"}, "augmentation")
        kwargs["augmentation"] = AugmentationTemplate(
            order=tuple(section.get("order", DEFAULT_ORDER)),
            phrases=dict(DEFAULT_PHRASES) | dict(section.get("phrases", {})),
        )

    if "paths" in raw:
        section = raw["paths"]
        _take(section, {"workdir", "interactions", "catalog", "qrels"}, "paths")
        kwargs["paths"] = PathsConfig(
            workdir=Path(section.get("workdir", "artifacts")),
            interactions=Path(section["interactions"]) if section.get("interactions") else None,
            catalog=Path(section["catalog"]) if section.get("catalog") else None,
            qrels=Path(section["qrels"]) if section.get("qrels") else None,
        )

    try:
        return PipelineConfig(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    """Parse a JSON config file with defaults and unknown-key rejection."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return _parse_config(raw)
