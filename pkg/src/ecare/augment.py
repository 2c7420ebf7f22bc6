"""Factor-augmented text composition and a frozen-embedding relevance head.

Augmentation appends per-subset connective phrases with the top factors to
query and product text; the relevance head is a softmax MLP over combined
frozen embeddings, the desk-scale downstream consumer of the augmented text.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .adapter import EmbedFn

log = logging.getLogger(__name__)

FALLBACK_PHRASE = "related to"

DEFAULT_PHRASES: dict[str, str] = {
    "feature:category": "belongs to categories of",
    "feature:style": "has style of",
    "feature:usage": "can be used for",
    "need:need": "with intention of",
    "utility:where_when": "can be used at",
    "utility:who": "can be used by",
    "utility:why": "with purpose of",
}

DEFAULT_ORDER: tuple[str, ...] = (
    "feature:category",
    "feature:style",
    "feature:usage",
    "need:need",
    "utility:where_when",
    "utility:who",
    "utility:why",
)


class AugmentError(Exception):
    pass


@dataclass(frozen=True)
class AugmentationTemplate:
    """Ordered subset-to-phrase mapping with a fallback for new subsets."""

    order: tuple[str, ...] = DEFAULT_ORDER
    phrases: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_PHRASES))

    def phrase_for(self, subset_key: str) -> str:
        return self.phrases.get(subset_key, FALLBACK_PHRASE)

    def ordered_subsets(self, present: Sequence[str]) -> list[str]:
        listed = [key for key in self.order if key in present]
        extras = sorted(key for key in present if key not in self.order)
        return listed + extras


def compose_augmentation(
    base_text: str,
    factors: Mapping[str, Sequence[str]],
    template: AugmentationTemplate,
) -> str:
    """Append ", <phrase> [f1, f2]" segments in template order.

    Subsets with no factors are skipped; base_text is returned untouched
    when the factor map is empty.
    """
    present = [key for key, texts in factors.items() if texts]
    segments = []
    for key in template.ordered_subsets(present):
        texts = factors[key]
        segments.append(f"{template.phrase_for(key)} [{', '.join(texts)}]")
    if not segments:
        return base_text
    return base_text + ", " + ", ".join(segments)


def augment_product(
    title: str,
    description: str,
    factors: Mapping[str, Sequence[str]],
    template: AugmentationTemplate,
) -> str:
    """Insert the factor augmentation between the title and the description."""
    augmented = compose_augmentation(title, factors, template)
    return f"{augmented} {description}" if description else augmented


# -- relevance head --------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    """Relevance head hyperparameters."""

    hidden_dims: tuple[int, ...] = (256,)
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 17

    @classmethod
    def from_dict(cls, raw: dict) -> "HeadConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise AugmentError(f"unknown head config keys: {sorted(unknown)}")
        coerced = dict(raw)
        if "hidden_dims" in coerced:
            coerced["hidden_dims"] = tuple(coerced["hidden_dims"])
        return cls(**coerced)


@dataclass
class RelevanceHead:
    """Softmax MLP over the combined pair representation."""

    params: list[tuple[np.ndarray, np.ndarray]]
    labels: tuple[str, ...]


def pair_features(e_q: np.ndarray, e_p: np.ndarray) -> np.ndarray:
    """[e_q, e_p, e_q * e_p, |e_q - e_p|] along the last axis."""
    return np.concatenate([e_q, e_p, e_q * e_p, np.abs(e_q - e_p)], axis=-1)


def train_relevance_head(
    pairs: Sequence[tuple[str, str, str]],
    config: HeadConfig,
    embed_fn: EmbedFn,
) -> RelevanceHead:
    """Train on (query text, product text, label) triples; seed-deterministic."""
    labels = tuple(sorted({label for _, _, label in pairs}))
    if len(labels) < 2:
        raise AugmentError(f"need at least 2 classes, got {labels}")
    label_index = {label: i for i, label in enumerate(labels)}

    texts = sorted({t for q, p, _ in pairs for t in (q, p)})
    vectors = dict(zip(texts, embed_fn(texts)))
    x = np.stack([pair_features(vectors[q], vectors[p]) for q, p, _ in pairs])
    y = np.array([label_index[label] for _, _, label in pairs], dtype=np.int64)

    dims = [x.shape[1], *config.hidden_dims, len(labels)]
    params = nn.init_mlp(dims, np.random.default_rng([config.seed, 1]))
    adam = nn.AdamState.for_params(params)
    rng = np.random.default_rng([config.seed, 2])
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            batch = order[start : start + config.batch_size]
            logits, caches = nn.mlp_forward(params, x[batch])
            _, dlogits = nn.softmax_cross_entropy(logits, y[batch])
            grads, _ = nn.mlp_backward(params, caches, dlogits)
            params = nn.adam_step(params, grads, adam, config.learning_rate)
    return RelevanceHead(params=params, labels=labels)


def classify_relevance(
    head: RelevanceHead, query_text: str, product_text: str, embed_fn: EmbedFn
) -> tuple[dict[str, float], str]:
    """Label distribution and argmax label for one pair."""
    if not query_text or not product_text:
        raise AugmentError("query and product texts must be non-empty")
    e_q, e_p = embed_fn([query_text, product_text])
    logits, _ = nn.mlp_forward(head.params, pair_features(e_q, e_p)[None, :])
    probs = nn.softmax(logits)[0]
    distribution = {label: float(p) for label, p in zip(head.labels, probs)}
    best = max(head.labels, key=lambda label: (distribution[label], label))
    return distribution, best


def export_augmented_dataset(rows: Sequence[dict], path) -> None:
    """Write {query_id, product_id, augmented_query, augmented_product, label} JSONL."""
    wanted = ("query_id", "product_id", "augmented_query", "augmented_product", "label")
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            record = {key: row[key] for key in wanted}
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n")
