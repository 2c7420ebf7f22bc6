"""Per-subset two-tower adapters over frozen embeddings.

One MLP per (entity kind, subset) maps both the entity embedding and the
factor embeddings into a shared comparison space scored by cosine. Training
is InfoNCE over graph edges with uniform negative sampling; prediction ranks
every factor in the subset and keeps the top-k. The same machinery rewires
product edges for cold-start coverage.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .graph import FactorSubsetId, ReasoningFactorGraph
from . import nn

log = logging.getLogger(__name__)

EmbedFn = Callable[[Sequence[str]], list[np.ndarray]]

ADAPTER_MAGIC = b"ECAD"
ADAPTER_FORMAT_VERSION = 1
CACHE_MAGIC = b"ECEB"
CACHE_FORMAT_VERSION = 1


class AdapterError(Exception):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    """Training hyperparameters; all knobs are config keys."""

    hidden_dims: tuple[int, ...] = (512, 256)
    output_dim: int = 128
    negatives_per_positive: int = 8
    epochs: int = 20
    learning_rate: float = 1e-3
    seed: int = 13
    temperature: float = 1.0
    batch_size: int = 64
    eval_fraction: float = 0.1

    def __post_init__(self) -> None:
        values = {
            "output_dim": self.output_dim,
            "negatives_per_positive": self.negatives_per_positive,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "temperature": self.temperature,
            "batch_size": self.batch_size,
        }
        for name, value in values.items():
            if value <= 0:
                raise AdapterError(f"{name} must be positive, got {value}")
        if any(h <= 0 for h in self.hidden_dims):
            raise AdapterError("hidden dims must be positive")
        if not 0.0 < self.eval_fraction < 1.0:
            raise AdapterError("eval_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "AdapterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise AdapterError(f"unknown adapter config keys: {sorted(unknown)}")
        coerced = dict(raw)
        if "hidden_dims" in coerced:
            coerced["hidden_dims"] = tuple(coerced["hidden_dims"])
        return cls(**coerced)


@dataclass
class AdapterModel:
    """Trained MLP for one (entity kind, subset)."""

    subset_key: str
    entity_kind: str
    params: list[tuple[np.ndarray, np.ndarray]]

    def encode(self, x: np.ndarray) -> np.ndarray:
        out, _ = nn.mlp_forward(self.params, x)
        return out


# -- similarity and loss -----------------------------------------------------


def adapter_similarity(
    params: list[tuple[np.ndarray, np.ndarray]],
    query_embedding: np.ndarray,
    factor_embedding: np.ndarray,
) -> float:
    """Cosine of the two inputs after passing both through the same tower."""
    stacked = np.stack([np.asarray(query_embedding, float), np.asarray(factor_embedding, float)])
    out, _ = nn.mlp_forward(params, stacked)
    norms = np.linalg.norm(out, axis=1)
    if np.any(norms == 0):
        raise AdapterError("degenerate zero-norm tower output; cosine undefined")
    return float(out[0] @ out[1] / (norms[0] * norms[1]))


def _check_norms(out: np.ndarray) -> None:
    if np.any(np.linalg.norm(out, axis=-1) == 0):
        raise nn.NumericError("zero-norm tower output; cosine undefined")


def info_nce_loss_and_grad(
    params: list[tuple[np.ndarray, np.ndarray]],
    query_embedding: np.ndarray,
    positive_embeddings: np.ndarray,
    negative_embeddings: np.ndarray,
    temperature: float = 1.0,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Contrastive loss for one query against its positives and negatives.

    For each positive the softmax denominator holds that positive plus all
    negatives; the loss is the mean over positives. Gradients flow through
    the cosine and the shared tower by backpropagation.
    """
    q = np.atleast_2d(np.asarray(query_embedding, float))
    pos = np.atleast_2d(np.asarray(positive_embeddings, float))
    neg = np.atleast_2d(np.asarray(negative_embeddings, float))
    if pos.shape[0] < 1 or neg.shape[0] < 1:
        raise AdapterError("need at least one positive and one negative")
    n_pos, n_neg = pos.shape[0], neg.shape[0]
    x = np.vstack([q, pos, neg])
    out, caches = nn.mlp_forward(params, x)
    _check_norms(out)
    a = out[0:1]
    y_pos = out[1 : 1 + n_pos]
    y_neg = out[1 + n_pos :]

    a_for_pos = np.broadcast_to(a, y_pos.shape)
    a_for_neg = np.broadcast_to(a, y_neg.shape)
    s_pos = nn.cosine_rows(a_for_pos, y_pos)
    s_neg = nn.cosine_rows(a_for_neg, y_neg)

    logits = np.concatenate([s_pos[:, None], np.tile(s_neg, (n_pos, 1))], axis=1) / temperature
    logp = nn.log_softmax(logits)
    loss = -float(logp[:, 0].mean())

    dlogits = np.exp(logp)
    dlogits[:, 0] -= 1.0
    dlogits /= n_pos * temperature
    ds_pos = dlogits[:, 0]
    ds_neg = dlogits[:, 1:].sum(axis=0)

    da_pos, dy_pos = nn.cosine_grad(a_for_pos, y_pos, s_pos, ds_pos)
    da_neg, dy_neg = nn.cosine_grad(a_for_neg, y_neg, s_neg, ds_neg)
    d_out = np.vstack(
        [
            (da_pos.sum(axis=0) + da_neg.sum(axis=0))[None, :],
            dy_pos,
            dy_neg,
        ]
    )
    grads, _ = nn.mlp_backward(params, caches, d_out)
    return loss, grads


def _pair_batch_loss(
    params: list[tuple[np.ndarray, np.ndarray]],
    q_batch: np.ndarray,
    pos_batch: np.ndarray,
    neg_batch: np.ndarray,
    temperature: float,
    with_grad: bool,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]] | None]:
    """InfoNCE over a batch of (query, positive, negatives) rows.

    neg_batch has shape (B, M, d); the batch loss is the mean of per-pair
    losses, which matches uniform sampling of (query, positive) pairs.
    """
    b, m = neg_batch.shape[0], neg_batch.shape[1]
    x = np.vstack([q_batch, pos_batch, neg_batch.reshape(b * m, -1)])
    out, caches = nn.mlp_forward(params, x)
    _check_norms(out)
    dim_out = out.shape[1]
    aq = out[:b]
    ap = out[b : 2 * b]
    an = out[2 * b :].reshape(b, m, dim_out)

    s_pos = nn.cosine_rows(aq, ap)
    aq_b = np.broadcast_to(aq[:, None, :], an.shape)
    s_neg = nn.cosine_rows(aq_b, an)

    logits = np.concatenate([s_pos[:, None], s_neg], axis=1) / temperature
    logp = nn.log_softmax(logits)
    loss = -float(logp[:, 0].mean())
    if not with_grad:
        return loss, None

    dlogits = np.exp(logp)
    dlogits[:, 0] -= 1.0
    dlogits /= b * temperature
    d_aq_pos, d_ap = nn.cosine_grad(aq, ap, s_pos, dlogits[:, 0])
    d_aq_neg, d_an = nn.cosine_grad(aq_b, an, s_neg, dlogits[:, 1:])
    d_out = np.vstack(
        [
            d_aq_pos + d_aq_neg.sum(axis=1),
            d_ap,
            d_an.reshape(b * m, dim_out),
        ]
    )
    grads, _ = nn.mlp_backward(params, caches, d_out)
    return loss, grads


# -- training ------------------------------------------------------------------


@dataclass
class _TrainingData:
    entity_ids: list[str]
    factor_ids: list[str]
    entity_matrix: np.ndarray
    factor_matrix: np.ndarray
    pairs: list[tuple[int, int]]
    positives_of: dict[int, set[int]]
    pools: dict[int, np.ndarray]


def _collect_training_data(
    graph: ReasoningFactorGraph,
    subset: FactorSubsetId,
    entity_kind: str,
    negatives_per_positive: int,
    embed_fn: EmbedFn,
) -> _TrainingData:
    factor_nodes = graph.factors_in_subset(subset)
    if len(factor_nodes) < 2:
        raise AdapterError(
            f"subset {subset.key!r} has {len(factor_nodes)} factors; need at least 2"
        )
    factor_ids = [node.id for node in factor_nodes]
    factor_index = {fid: i for i, fid in enumerate(factor_ids)}

    positives_by_entity: dict[str, set[int]] = {}
    for ent in graph.entities_of_kind(entity_kind):
        edges = graph.edges_of_entity(ent.id, subset)
        if edges:
            positives_by_entity[ent.id] = {factor_index[e.factor] for e in edges}
    if not positives_by_entity:
        raise AdapterError(
            f"no positive ({entity_kind}, factor) pairs in subset {subset.key!r}"
        )

    entity_ids = sorted(positives_by_entity)
    entity_index = {eid: i for i, eid in enumerate(entity_ids)}
    all_indices = set(range(len(factor_ids)))

    pairs: list[tuple[int, int]] = []
    positives_of: dict[int, set[int]] = {}
    pools: dict[int, np.ndarray] = {}
    for eid in entity_ids:
        e_idx = entity_index[eid]
        pos = positives_by_entity[eid]
        pool = np.array(sorted(all_indices - pos), dtype=np.int64)
        if pool.size == 0:
            log.warning(
                "entity %s has every factor of %s as positive; skipped (no negatives)",
                eid,
                subset.key,
            )
            continue
        positives_of[e_idx] = pos
        pools[e_idx] = pool
        pairs.extend((e_idx, f_idx) for f_idx in sorted(pos))
    if not pairs:
        raise AdapterError(f"no trainable pairs in subset {subset.key!r}")

    entity_texts = [graph.entities[eid].text for eid in entity_ids]
    factor_texts = [node.text for node in factor_nodes]
    entity_matrix = np.stack(embed_fn(entity_texts))
    factor_matrix = np.stack(embed_fn(factor_texts))
    return _TrainingData(
        entity_ids=entity_ids,
        factor_ids=factor_ids,
        entity_matrix=entity_matrix,
        factor_matrix=factor_matrix,
        pairs=pairs,
        positives_of=positives_of,
        pools=pools,
    )


def _sample_negatives(
    pool: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    take = min(count, pool.size)
    return np.sort(rng.choice(pool, size=take, replace=False))


def _grouped_batches(
    items: list[tuple[int, int, np.ndarray]], batch_size: int
) -> list[list[tuple[int, int, np.ndarray]]]:
    """Chunk, then split each chunk by negative count so arrays stack."""
    batches = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        by_count: dict[int, list[tuple[int, int, np.ndarray]]] = {}
        for item in chunk:
            by_count.setdefault(item[2].size, []).append(item)
        for count in sorted(by_count, reverse=True):
            batches.append(by_count[count])
    return batches


def _batch_arrays(
    data: _TrainingData, group: list[tuple[int, int, np.ndarray]]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = data.entity_matrix[np.fromiter((e for e, _, _ in group), dtype=np.int64)]
    p = data.factor_matrix[np.fromiter((f for _, f, _ in group), dtype=np.int64)]
    neg_indices = np.vstack([negs for _, _, negs in group])
    n = data.factor_matrix[neg_indices]
    return q, p, n


def _eval_loss(
    params: list[tuple[np.ndarray, np.ndarray]],
    data: _TrainingData,
    eval_items: list[tuple[int, int, np.ndarray]],
    temperature: float,
) -> float:
    total, count = 0.0, 0
    for group in _grouped_batches(eval_items, batch_size=len(eval_items) or 1):
        q, p, n = _batch_arrays(data, group)
        loss, _ = _pair_batch_loss(params, q, p, n, temperature, with_grad=False)
        total += loss * len(group)
        count += len(group)
    return total / count


def _rank_rows(sims: np.ndarray, ids: list[str], k: int) -> list[tuple[str, float]]:
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [(ids[i], float(sims[i])) for i in order[:k]]


def _top_k_for_entities(
    params: list[tuple[np.ndarray, np.ndarray]],
    entity_matrix: np.ndarray,
    factor_matrix: np.ndarray,
    factor_ids: list[str],
    k: int,
) -> list[list[tuple[str, float]]]:
    out_e, _ = nn.mlp_forward(params, entity_matrix)
    out_f, _ = nn.mlp_forward(params, factor_matrix)
    _check_norms(out_e)
    _check_norms(out_f)
    unit_e = out_e / np.linalg.norm(out_e, axis=1, keepdims=True)
    unit_f = out_f / np.linalg.norm(out_f, axis=1, keepdims=True)
    sims = unit_e @ unit_f.T
    return [_rank_rows(sims[i], factor_ids, k) for i in range(sims.shape[0])]


def _heldout_s1(
    params: list[tuple[np.ndarray, np.ndarray]],
    data: _TrainingData,
    eval_pairs: list[tuple[int, int]],
) -> float:
    """Mean best-positive cosine of the top-1 prediction over held-out pairs."""
    by_entity: dict[int, set[int]] = {}
    for e_idx, f_idx in eval_pairs:
        by_entity.setdefault(e_idx, set()).add(f_idx)
    entity_indices = sorted(by_entity)
    raw_unit = data.factor_matrix / np.linalg.norm(data.factor_matrix, axis=1, keepdims=True)
    tops = _top_k_for_entities(
        params,
        data.entity_matrix[entity_indices],
        data.factor_matrix,
        data.factor_ids,
        k=1,
    )
    id_index = {fid: i for i, fid in enumerate(data.factor_ids)}
    values = []
    for row, e_idx in zip(tops, entity_indices):
        top_fid, _ = row[0]
        predicted = raw_unit[id_index[top_fid]]
        positives = raw_unit[sorted(by_entity[e_idx])]
        values.append(float(np.max(positives @ predicted)))
    return float(np.mean(values))


def train_adapter(
    graph: ReasoningFactorGraph,
    subset: FactorSubsetId,
    entity_kind: str,
    config: AdapterConfig,
    embed_fn: EmbedFn,
) -> tuple[AdapterModel, dict]:
    """Train the subset adapter on graph edges; returns model and report.

    Positive pairs split 9:1 (by eval_fraction) into train/eval; negatives
    resample uniformly each epoch from the subset's non-positives. The
    returned parameters are the snapshot with the best eval loss.
    """
    data = _collect_training_data(
        graph, subset, entity_kind, config.negatives_per_positive, embed_fn
    )
    n_pairs = len(data.pairs)
    split_rng = np.random.default_rng([config.seed, 1])
    perm = split_rng.permutation(n_pairs)
    n_eval = int(round(n_pairs * config.eval_fraction))
    if n_pairs >= 2:
        n_eval = min(max(n_eval, 1), n_pairs - 1)
    else:
        n_eval = 0
    eval_pairs = [data.pairs[i] for i in perm[:n_eval]]
    train_pairs = [data.pairs[i] for i in perm[n_eval:]]
    if not eval_pairs:
        log.warning("subset %s: single pair; evaluating on the training pair", subset.key)
        eval_pairs = list(train_pairs)

    dim = data.entity_matrix.shape[1]
    dims = [dim, *config.hidden_dims, config.output_dim]
    params = nn.init_mlp(dims, np.random.default_rng([config.seed, 2]))

    eval_neg_rng = np.random.default_rng([config.seed, 3])
    eval_items = [
        (e, f, _sample_negatives(data.pools[e], config.negatives_per_positive, eval_neg_rng))
        for e, f in eval_pairs
    ]

    initial_s1 = _heldout_s1(params, data, eval_pairs)
    best_loss = _eval_loss(params, data, eval_items, config.temperature)
    best_params = nn.copy_params(params)
    best_epoch = -1

    train_rng = np.random.default_rng([config.seed, 4])
    adam = nn.AdamState.for_params(params)
    train_curve: list[float] = []
    eval_curve: list[float] = [best_loss]
    for epoch in range(config.epochs):
        order = train_rng.permutation(len(train_pairs))
        items = [
            (
                train_pairs[i][0],
                train_pairs[i][1],
                _sample_negatives(
                    data.pools[train_pairs[i][0]], config.negatives_per_positive, train_rng
                ),
            )
            for i in order
        ]
        epoch_loss, seen = 0.0, 0
        for group in _grouped_batches(items, config.batch_size):
            q, p, n = _batch_arrays(data, group)
            loss, grads = _pair_batch_loss(params, q, p, n, config.temperature, with_grad=True)
            params = nn.adam_step(params, grads, adam, config.learning_rate)
            epoch_loss += loss * len(group)
            seen += len(group)
        train_curve.append(epoch_loss / max(seen, 1))
        current = _eval_loss(params, data, eval_items, config.temperature)
        eval_curve.append(current)
        if current < best_loss:
            best_loss = current
            best_params = nn.copy_params(params)
            best_epoch = epoch

    best_s1 = _heldout_s1(best_params, data, eval_pairs)
    model = AdapterModel(subset_key=subset.key, entity_kind=entity_kind, params=best_params)
    report = {
        "subset": subset.key,
        "entity_kind": entity_kind,
        "pairs": n_pairs,
        "eval_pairs": len(eval_pairs),
        "train_loss": train_curve,
        "eval_loss": eval_curve,
        "best_epoch": best_epoch,
        "best_eval_loss": best_loss,
        "eval_s1_initial": initial_s1,
        "eval_s1_best": best_s1,
    }
    return model, report


# -- prediction -----------------------------------------------------------------


def build_factor_space(
    graph: ReasoningFactorGraph, factor_embeddings: Mapping[str, np.ndarray]
) -> dict[str, tuple[list[str], np.ndarray]]:
    """Per-subset (factor ids, embedding matrix) from a graph and cache."""
    space: dict[str, tuple[list[str], np.ndarray]] = {}
    for subset in graph.subsets():
        ids = [node.id for node in graph.factors_in_subset(subset)]
        missing = [fid for fid in ids if fid not in factor_embeddings]
        if missing:
            raise AdapterError(f"missing factor embeddings for {missing[:3]} ...")
        matrix = np.stack([np.asarray(factor_embeddings[fid], float) for fid in ids])
        space[subset.key] = (ids, matrix)
    return space


def predict_factors(
    adapters: Mapping[str, AdapterModel],
    text: str,
    k: int | Mapping[str, int],
    embed_fn: EmbedFn,
    factor_space: Mapping[str, tuple[list[str], np.ndarray]],
    subsets: Sequence[str] | None = None,
) -> dict[str, list[tuple[str, float]]]:
    """Rank factors per subset for one text; a single embedding call total."""
    wanted = sorted(subsets if subsets is not None else adapters)
    for key in wanted:
        if key not in adapters:
            raise AdapterError(f"no adapter for subset {key!r}")
        if key not in factor_space:
            raise AdapterError(f"no factor embeddings for subset {key!r}")
    query_embedding = embed_fn([text])[0]
    out: dict[str, list[tuple[str, float]]] = {}
    for key in wanted:
        ids, matrix = factor_space[key]
        k_here = k if isinstance(k, int) else k.get(key, 1)
        rows = _top_k_for_entities(
            adapters[key].params, query_embedding[None, :], matrix, ids, k_here
        )
        out[key] = rows[0]
    return out


def predicted_factor_union(predictions: Mapping[str, list[tuple[str, float]]]) -> list[str]:
    """The union of predicted factor ids across subsets, sorted."""
    return sorted({fid for rows in predictions.values() for fid, _ in rows})


def evaluate_sk(
    adapter: AdapterModel,
    graph: ReasoningFactorGraph,
    subset: FactorSubsetId,
    k: int,
    embed_fn: EmbedFn,
) -> float:
    """Mean best-positive cosine of the adapter's top-k predictions.

    Predictions rank the whole subset; each predicted factor is matched to
    its most similar positive in raw embedding space. Entities without
    positives are skipped.
    """
    factor_nodes = graph.factors_in_subset(subset)
    factor_ids = [node.id for node in factor_nodes]
    if not factor_ids:
        raise AdapterError(f"subset {subset.key!r} has no factors")
    entities = [
        ent
        for ent in graph.entities_of_kind(adapter.entity_kind)
        if graph.edges_of_entity(ent.id, subset)
    ]
    if not entities:
        raise AdapterError(f"no qualifying entities for subset {subset.key!r}")
    factor_matrix = np.stack(embed_fn([node.text for node in factor_nodes]))
    entity_matrix = np.stack(embed_fn([ent.text for ent in entities]))
    raw_unit = factor_matrix / np.linalg.norm(factor_matrix, axis=1, keepdims=True)
    id_index = {fid: i for i, fid in enumerate(factor_ids)}

    tops = _top_k_for_entities(adapter.params, entity_matrix, factor_matrix, factor_ids, k)
    values = []
    for ent, row in zip(entities, tops):
        positive_rows = [id_index[e.factor] for e in graph.edges_of_entity(ent.id, subset)]
        positives = raw_unit[positive_rows]
        per_prediction = [float(np.max(positives @ raw_unit[id_index[fid]])) for fid, _ in row]
        values.append(float(np.mean(per_prediction)))
    return float(np.mean(values))


def rewire_product_edges(
    graph: ReasoningFactorGraph,
    product_adapters: Mapping[str, AdapterModel],
    k: int | Mapping[str, int],
    embed_fn: EmbedFn,
    factor_embeddings: Mapping[str, np.ndarray],
) -> ReasoningFactorGraph:
    """Replace every product's need/utility edges with adapter predictions.

    Feature-subset edges and all query edges are untouched. New edges carry
    the adapter similarity as confidence.
    """
    reasoning_subsets = [s for s in graph.subsets() if s.kind in ("need", "utility")]
    missing = [s.key for s in reasoning_subsets if s.key not in product_adapters]
    if missing:
        raise AdapterError(f"missing product adapters for subsets {missing}")
    space = build_factor_space(graph, factor_embeddings)

    out = graph.copy(stage="rewired")
    products = out.entities_of_kind("product")
    reasoning_keys = {s.key for s in reasoning_subsets}
    for (eid, fid) in sorted(graph.edges):
        if out.entities[eid].kind != "product":
            continue
        if graph.factors[fid].subset.key in reasoning_keys:
            del out.edges[(eid, fid)]

    if products:
        title_matrix = np.stack(embed_fn([p.text for p in products]))
        for subset in reasoning_subsets:
            ids, matrix = space[subset.key]
            k_here = k if isinstance(k, int) else k.get(subset.key, 1)
            rows = _top_k_for_entities(
                product_adapters[subset.key].params, title_matrix, matrix, ids, k_here
            )
            for product, row in zip(products, rows):
                for fid, sim in row:
                    out.add_edge(product.id, fid, multiplicity=1, confidence=max(-1.0, min(1.0, sim)))
    return out


# -- binary artifact formats -----------------------------------------------------


def save_adapter(model: AdapterModel, path) -> None:
    """Write the ECAD binary: magic, version, subset tag, f32 layers."""
    with open(path, "wb") as fh:
        fh.write(ADAPTER_MAGIC)
        fh.write(struct.pack("<I", ADAPTER_FORMAT_VERSION))
        tag = model.subset_key.encode("utf-8")
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<I", len(model.params)))
        for w, b in model.params:
            rows, cols = w.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(w.astype("<f4").tobytes(order="C"))
            fh.write(b.astype("<f4").tobytes(order="C"))


def load_adapter(path, entity_kind: str) -> AdapterModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if view[:4] != ADAPTER_MAGIC:
        raise AdapterError(f"{path}: not an adapter file")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != ADAPTER_FORMAT_VERSION:
        raise AdapterError(f"{path}: unsupported adapter format version {version}")
    offset = 8
    (tag_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    subset_key = bytes(view[offset : offset + tag_len]).decode("utf-8")
    offset += tag_len
    (n_layers,) = struct.unpack_from("<I", view, offset)
    offset += 4
    params = []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", view, offset)
        offset += 8
        w = np.frombuffer(view, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        offset += rows * cols * 4
        b = np.frombuffer(view, dtype="<f4", count=cols, offset=offset)
        offset += cols * 4
        params.append((w.astype(np.float64), b.astype(np.float64)))
    return AdapterModel(subset_key=subset_key, entity_kind=entity_kind, params=params)


def save_embedding_cache(path, entries: Mapping[str, np.ndarray]) -> None:
    """Write the ECEB binary cache of id -> f32 vector, sorted by id."""
    ids = sorted(entries)
    if not ids:
        raise AdapterError("refusing to write an empty embedding cache")
    dim = int(np.asarray(entries[ids[0]]).shape[0])
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", CACHE_FORMAT_VERSION))
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<Q", len(ids)))
        for key in ids:
            vec = np.asarray(entries[key], dtype="<f4")
            if vec.shape != (dim,):
                raise AdapterError(f"cache entry {key!r} has dimension {vec.shape}, expected ({dim},)")
            encoded = key.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(vec.tobytes(order="C"))


def load_embedding_cache(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if view[:4] != CACHE_MAGIC:
        raise AdapterError(f"{path}: not an embedding cache file")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CACHE_FORMAT_VERSION:
        raise AdapterError(f"{path}: unsupported cache format version {version}")
    (dim,) = struct.unpack_from("<I", view, 8)
    (count,) = struct.unpack_from("<Q", view, 12)
    offset = 20
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (key_len,) = struct.unpack_from("<I", view, offset)
        offset += 4
        key = bytes(view[offset : offset + key_len]).decode("utf-8")
        offset += key_len
        vec = np.frombuffer(view, dtype="<f4", count=dim, offset=offset)
        offset += dim * 4
        entries[key] = vec.astype(np.float64)
    return entries


class EmbedMemo:
    """Caches embeddings by text; batches misses into one provider call."""

    def __init__(self, embed_fn: EmbedFn) -> None:
        self._embed_fn = embed_fn
        self.cache: dict[str, np.ndarray] = {}

    def __call__(self, texts: Sequence[str]) -> list[np.ndarray]:
        misses = sorted({t for t in texts if t not in self.cache})
        if misses:
            for text, vec in zip(misses, self._embed_fn(misses)):
                self.cache[text] = vec
        return [self.cache[t] for t in texts]
