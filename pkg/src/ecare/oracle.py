"""Synthetic oracle provider backed by a seeded latent world.

The world assigns every product group a latent profile: one latent factor
per feature type and per utility scope, plus one latent need per scope.
Queries inherit the profile of their target group. The provider answers
extraction, reasoning, summarization, and edge-filter prompts directly from
that assignment, and embeds texts so that surface forms of one latent factor
land near each other (cosine >= 0.95) while unrelated texts stay
near-orthogonal in expectation. Entity texts embed through a fixed random
rotation of their latent mixture, so raw query/factor similarity carries no
signal and adapters must learn the alignment.

Everything is a pure function of (seed, params, prompt), which keeps
pipeline runs reproducible byte for byte.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np

from .prompts import reasoning_answer_stem, reasoning_question
from .providers import Provider, ProviderError, ProviderResponse, prompt_digest


class OracleError(ProviderError):
    """The oracle cannot interpret a prompt or text."""


def _h(*parts) -> int:
    joined = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(joined.encode("utf-8")).digest()[:8], "big")


def _unit_interval(*parts) -> float:
    return _h(*parts) / 2.0**64


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(_h(*parts))


@dataclass(frozen=True)
class OracleWorldParams:
    """Shape of the latent world; defaults match the synthetic benchmark."""

    n_queries: int = 200
    n_products: int = 2000
    group_size: int = 5
    queries_per_group: int = 1
    latents_per_subset: int = 50
    surface_forms: int = 3
    embedding_dim: int = 384
    decoy_rate: float = 0.25
    scopes: tuple[str, ...] = ("where_when", "why", "who")
    feature_types: tuple[str, ...] = ("category", "style", "usage")
    irrelevant_per_query: int = 2
    positive_label: str = "Exact"
    negative_label: str = "Irrelevant"
    surface_noise: float = 0.15
    entity_noise: float = 0.05

    def __post_init__(self) -> None:
        if self.queries_per_group < 1:
            raise OracleError("queries_per_group must be positive")
        groups_needed = -(-self.n_queries // self.queries_per_group)
        if self.n_products // self.group_size < groups_needed:
            raise OracleError("not enough product groups for the requested query count")
        if not 1 <= self.surface_forms <= 9:
            raise OracleError("surface_forms must be between 1 and 9")
        if self.latents_per_subset > 99:
            raise OracleError("latents_per_subset must be at most 99")

    @classmethod
    def from_dict(cls, raw: dict) -> "OracleWorldParams":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise OracleError(f"unknown oracle world keys: {sorted(unknown)}")
        coerced = dict(raw)
        for key in ("scopes", "feature_types"):
            if key in coerced:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["scopes"] = list(self.scopes)
        out["feature_types"] = list(self.feature_types)
        return out


@dataclass
class GroupProfile:
    """Latent assignment of one product group."""

    features: dict[str, int]
    needs: dict[str, int]
    utilities: dict[str, int]

    def latents_for(self, subset_key: str) -> set[int]:
        kind, _, tag = subset_key.partition(":")
        if kind == "feature":
            return {self.features[tag]} if tag in self.features else set()
        if kind == "need":
            return set(self.needs.values())
        if kind == "utility":
            return {self.utilities[tag]} if tag in self.utilities else set()
        return set()

    def all_latents(self, subset_keys: list[str]) -> list[tuple[str, int]]:
        pairs: list[tuple[str, int]] = []
        for key in subset_keys:
            for latent in sorted(self.latents_for(key)):
                pairs.append((key, latent))
        return pairs


@dataclass
class _RegisteredText:
    kind: str  # "factor" | "query" | "product"
    subset_key: str | None = None
    latent: int | None = None
    is_decoy: bool = False
    index: int | None = None


class LatentWorld:
    """Seeded ground truth: vectors, texts, profiles, and datasets."""

    def __init__(self, seed: int, params: OracleWorldParams) -> None:
        self.seed = seed
        self.params = params
        self.subset_keys = (
            [f"feature:{name}" for name in params.feature_types]
            + ["need:need"]
            + [f"utility:{scope}" for scope in params.scopes]
        )
        d = params.embedding_dim
        n_latents = params.latents_per_subset

        self.base_vectors: dict[str, np.ndarray] = {}
        self.decoy_vectors: dict[str, np.ndarray] = {}
        for subset_key in self.subset_keys:
            rng = _rng(seed, "latents", subset_key)
            base = rng.normal(size=(n_latents, d))
            base /= np.linalg.norm(base, axis=1, keepdims=True)
            raw = rng.normal(size=(n_latents, d))
            raw -= (np.einsum("ld,ld->l", raw, base))[:, None] * base
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            # Decoys sit at cosine ~0.72 from their paired latent: close enough
            # to look redundant, far enough that clustering never merges them.
            self.decoy_vectors[subset_key] = 0.72 * base + np.sqrt(1 - 0.72**2) * raw
            self.base_vectors[subset_key] = base

        rotation_rng = _rng(seed, "rotation")
        q, r = np.linalg.qr(rotation_rng.normal(size=(d, d)))
        self.rotation = q * np.sign(np.diag(r))

        n_groups = params.n_products // params.group_size
        self.profiles: list[GroupProfile] = []
        for g in range(n_groups):
            rng = _rng(seed, "profile", g)
            self.profiles.append(
                GroupProfile(
                    features={name: int(rng.integers(n_latents)) for name in params.feature_types},
                    needs={scope: int(rng.integers(n_latents)) for scope in params.scopes},
                    utilities={scope: int(rng.integers(n_latents)) for scope in params.scopes},
                )
            )

        self._shorts = {
            key: f"{key.partition(':')[2][:3]}{i}" for i, key in enumerate(self.subset_keys)
        }

        self.product_ids = [f"p{i:05d}" for i in range(params.n_products)]
        self.query_ids = [f"q{i:04d}" for i in range(params.n_queries)]
        self.product_titles: list[str] = []
        self.product_descriptions: list[str] = []
        for idx, pid in enumerate(self.product_ids):
            profile = self.profiles[idx // params.group_size]
            feature_bits = [
                self.surface_text(f"feature:{name}", profile.features[name], self._product_variant(pid, f"feature:{name}"))
                for name in params.feature_types
            ]
            reasoning_bits = [
                self.surface_text("need:need", profile.needs[scope], self._product_variant(pid, f"need:{scope}"))
                for scope in params.scopes
            ] + [
                self.surface_text(f"utility:{scope}", profile.utilities[scope], self._product_variant(pid, f"utility:{scope}"))
                for scope in params.scopes
            ]
            self.product_titles.append(f"prd {pid} " + " ".join(feature_bits))
            self.product_descriptions.append(" ".join(reasoning_bits))

        self.query_texts: list[str] = []
        for idx, qid in enumerate(self.query_ids):
            profile = self.profiles[idx // params.queries_per_group]
            bits = [self.phrase(key, latent, "q") for key, latent in profile.all_latents(self.subset_keys)]
            self.query_texts.append(f"qry {qid} " + " ".join(bits))

        self.registry: dict[str, _RegisteredText] = {}
        variants = [str(k) for k in range(params.surface_forms)] + ["c", "q"]
        for subset_key in self.subset_keys:
            for latent in range(n_latents):
                for variant in variants:
                    self.registry[self.phrase(subset_key, latent, variant)] = _RegisteredText(
                        "factor", subset_key=subset_key, latent=latent
                    )
                self.registry[self.phrase(subset_key, latent, "d")] = _RegisteredText(
                    "factor", subset_key=subset_key, latent=latent, is_decoy=True
                )
        for idx, text in enumerate(self.query_texts):
            self.registry[text] = _RegisteredText("query", index=idx)
        for idx, text in enumerate(self.product_titles):
            self.registry[text] = _RegisteredText("product", index=idx)

        self._embedding_cache: dict[str, np.ndarray] = {}

    # -- text construction ---------------------------------------------------

    def phrase(self, subset_key: str, latent: int, variant: str) -> str:
        stem = f"{self._shorts[subset_key]}{latent:02d}{variant}"
        return f"{stem}a {stem}b"

    def surface_text(self, subset_key: str, latent: int, variant_index: int) -> str:
        return self.phrase(subset_key, latent, str(variant_index))

    def canonical_text(self, subset_key: str, latent: int) -> str:
        return self.phrase(subset_key, latent, "c")

    def decoy_text(self, subset_key: str, latent: int) -> str:
        return self.phrase(subset_key, latent, "d")

    def _product_variant(self, pid: str, slot: str) -> int:
        return _h(self.seed, "pvar", pid, slot) % self.params.surface_forms

    # -- profiles --------------------------------------------------------------

    def profile_of_product(self, index: int) -> GroupProfile:
        return self.profiles[index // self.params.group_size]

    def group_of_query(self, index: int) -> int:
        return index // self.params.queries_per_group

    def profile_of_query(self, index: int) -> GroupProfile:
        return self.profiles[self.group_of_query(index)]

    def relevant_products(self, query_index: int) -> list[str]:
        start = self.group_of_query(query_index) * self.params.group_size
        return self.product_ids[start : start + self.params.group_size]

    # -- embeddings -------------------------------------------------------------

    def _noise(self, text: str) -> np.ndarray:
        vec = _rng(self.seed, "noise", text).normal(size=self.params.embedding_dim)
        return vec / np.linalg.norm(vec)

    def _mixture(self, profile: GroupProfile) -> np.ndarray:
        total = np.zeros(self.params.embedding_dim)
        for subset_key, latent in profile.all_latents(self.subset_keys):
            total += self.base_vectors[subset_key][latent]
        return total / np.linalg.norm(total)

    def embedding(self, text: str) -> np.ndarray:
        cached = self._embedding_cache.get(text)
        if cached is not None:
            return cached
        entry = self.registry.get(text)
        if entry is None:
            vec = self._compositional_embedding(text)
        elif entry.kind == "factor":
            table = self.decoy_vectors if entry.is_decoy else self.base_vectors
            noise = 0.05 if entry.is_decoy else self.params.surface_noise
            vec = table[entry.subset_key][entry.latent] + noise * self._noise(text)
        else:
            profile = (
                self.profile_of_query(entry.index)
                if entry.kind == "query"
                else self.profile_of_product(entry.index)
            )
            vec = self.rotation @ self._mixture(profile) + self.params.entity_noise * self._noise(text)
        vec = vec / np.linalg.norm(vec)
        self._embedding_cache[text] = vec
        return vec

    def _compositional_embedding(self, text: str) -> np.ndarray:
        """Embed unseen text by the registered phrases it contains."""
        total = np.zeros(self.params.embedding_dim)
        matched = False
        for phrase, entry in self.registry.items():
            if phrase in text:
                matched = True
                if entry.kind == "factor":
                    table = self.decoy_vectors if entry.is_decoy else self.base_vectors
                    total += table[entry.subset_key][entry.latent]
                else:
                    profile = (
                        self.profile_of_query(entry.index)
                        if entry.kind == "query"
                        else self.profile_of_product(entry.index)
                    )
                    total += self.rotation @ self._mixture(profile)
        if not matched:
            return self._noise(text)
        return total + 0.25 * self._noise(text)

    # -- ground-truth judgments --------------------------------------------------

    def entity_entry(self, text: str) -> _RegisteredText | None:
        entry = self.registry.get(text)
        if entry is not None and entry.kind in ("query", "product"):
            return entry
        return None

    def judge_edge(self, entity_text: str, subset_key: str, factor_text: str) -> bool:
        entity = self.entity_entry(entity_text)
        factor = self.registry.get(factor_text)
        if entity is None or factor is None or factor.kind != "factor" or factor.is_decoy:
            return False
        if factor.subset_key != subset_key:
            return False
        profile = (
            self.profile_of_query(entity.index)
            if entity.kind == "query"
            else self.profile_of_product(entity.index)
        )
        return factor.latent in profile.latents_for(subset_key)

    def summarize_members(self, members: list[str]) -> str:
        votes: dict[tuple[str, int, bool], int] = {}
        order: list[tuple[str, int, bool]] = []
        for member in members:
            entry = self.registry.get(member)
            if entry is None or entry.kind != "factor":
                continue
            key = (entry.subset_key, entry.latent, entry.is_decoy)
            if key not in votes:
                order.append(key)
            votes[key] = votes.get(key, 0) + 1
        if not votes:
            raise OracleError(f"cluster members are not known factor texts: {members!r}")
        best = max(order, key=lambda key: votes[key])
        subset_key, latent, is_decoy = best
        return self.decoy_text(subset_key, latent) if is_decoy else self.canonical_text(subset_key, latent)

    # -- datasets -----------------------------------------------------------------

    def interaction_records(self) -> list[dict]:
        records = []
        p = self.params
        for q_idx, qid in enumerate(self.query_ids):
            group_start = self.group_of_query(q_idx) * p.group_size
            for p_idx in range(group_start, group_start + p.group_size):
                records.append(self._record(q_idx, p_idx, p.positive_label))
            rng = _rng(self.seed, "negatives", qid)
            distractors = [
                i for i in rng.choice(p.n_products, size=min(p.irrelevant_per_query * 3, p.n_products), replace=False)
                if not group_start <= i < group_start + p.group_size
            ][: p.irrelevant_per_query]
            for p_idx in distractors:
                records.append(self._record(q_idx, int(p_idx), p.negative_label))
        return records

    def _record(self, q_idx: int, p_idx: int, label: str) -> dict:
        return {
            "query_id": self.query_ids[q_idx],
            "query": self.query_texts[q_idx],
            "product_id": self.product_ids[p_idx],
            "product_title": self.product_titles[p_idx],
            "product_description": self.product_descriptions[p_idx],
            "label": label,
        }

    def catalog_records(self) -> list[dict]:
        return [
            {
                "product_id": pid,
                "product_title": self.product_titles[i],
                "product_description": self.product_descriptions[i],
            }
            for i, pid in enumerate(self.product_ids)
        ]

    def qrels(self) -> list[dict]:
        return [
            {"query_id": qid, "query": self.query_texts[i], "relevant": self.relevant_products(i)}
            for i, qid in enumerate(self.query_ids)
        ]


def write_world_files(world: LatentWorld, directory) -> dict[str, str]:
    """Write interactions/catalog/qrels JSONL for a world; returns paths."""
    import json
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "interactions": directory / "interactions.jsonl",
        "catalog": directory / "catalog.jsonl",
        "qrels": directory / "qrels.jsonl",
    }
    datasets = {
        "interactions": world.interaction_records(),
        "catalog": world.catalog_records(),
        "qrels": world.qrels(),
    }
    for name, rows in datasets.items():
        with open(paths[name], "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    return {name: str(path) for name, path in paths.items()}


# -- prompt parsing --------------------------------------------------------------

_QUERY_LINE = re.compile(r"^<query>: (.*)$", re.MULTILINE)
_TITLE_LINE = re.compile(r"^title: (.*)$", re.MULTILINE)
_QUESTION_LINE = re.compile(r"^Q: Given <query>, (.*)$", re.MULTILINE)
_PHRASE_LIST_LINE = re.compile(r"^- Phrase List: \[(.*)\]$", re.MULTILINE)

_FILTER_LINE_PATTERNS: list[tuple[re.Pattern, str, str, str | None]] = [
    (
        re.compile(r"^The product '(?P<entity>.*)' will be used by '(?P<factor>.*)'\. Is this judgment reasonable\?$"),
        "product",
        "utility",
        "who",
    ),
    (
        re.compile(r"^The product '(?P<entity>.*)' will be used in the '(?P<factor>.*)' scenario\. Is this reasonable\?$"),
        "product",
        "utility",
        "where_when",
    ),
    (
        re.compile(r"^The product '(?P<entity>.*)' will be used with the purpose of '(?P<factor>.*)'\. Is this reasonable\?$"),
        "product",
        "utility",
        "why",
    ),
    (
        re.compile(r"^The product '(?P<entity>.*)' satisfies the need of '(?P<factor>.*)'\. Is this reasonable\?$"),
        "product",
        "need",
        "need",
    ),
    (
        re.compile(r"^The product '(?P<entity>.*)' provides the (?P<tag>[a-z_]+) utility of '(?P<factor>.*)'\. Is this reasonable\?$"),
        "product",
        "utility",
        None,
    ),
    (
        re.compile(r"^The product '(?P<entity>.*)' has (?P<tag>[a-z_]+) of '(?P<factor>.*)'\. Is this reasonable\?$"),
        "product",
        "feature",
        None,
    ),
    (
        re.compile(r"^The user searched for '(?P<entity>.*)', which means the user is a '(?P<factor>.*)'\. Is this reasonable\?$"),
        "query",
        "utility",
        "who",
    ),
    (
        re.compile(
            r"^The user searched for '(?P<entity>.*)', which indicates that the user's usage scenario is '(?P<factor>.*)'\. Is this reasonable\?$"
        ),
        "query",
        "utility",
        "where_when",
    ),
    (
        re.compile(
            r"^The user searched for '(?P<entity>.*)', which indicates that the user's purpose is '(?P<factor>.*)'\. Is this reasonable\?$"
        ),
        "query",
        "utility",
        "why",
    ),
    (
        re.compile(r"^The user searched for '(?P<entity>.*)', which means the user's need is '(?P<factor>.*)'\. Is this reasonable\?$"),
        "query",
        "need",
        "need",
    ),
    (
        re.compile(
            r"^The user searched for '(?P<entity>.*)', which relates to the (?P<tag>[a-z_]+) utility of '(?P<factor>.*)'\. Is this reasonable\?$"
        ),
        "query",
        "utility",
        None,
    ),
    (
        re.compile(
            r"^The user searched for '(?P<entity>.*)', which matches products whose (?P<tag>[a-z_]+) is '(?P<factor>.*)'\. Is this reasonable\?$"
        ),
        "query",
        "feature",
        None,
    ),
]


class OracleProvider(Provider):
    """Deterministic test double that answers from the latent world."""

    def __init__(self, seed: int, params: OracleWorldParams | None = None) -> None:
        super().__init__()
        self.seed = seed
        self.params = params or OracleWorldParams()
        self.world = LatentWorld(seed, self.params)

    # -- prompt dispatch ------------------------------------------------------

    def _complete(self, prompt: str) -> ProviderResponse:
        if "# Extraction:" in prompt:
            return ProviderResponse(text=self._answer_extraction(prompt))
        if prompt.rstrip().endswith("- General phrase:"):
            return ProviderResponse(text=self._answer_summarize(prompt))
        if _QUESTION_LINE.search(prompt):
            return ProviderResponse(text=self._answer_reasoning(prompt))
        judged = self._try_judge(prompt)
        if judged is not None:
            p_yes, p_no = self._probabilities(prompt, judged)
            return ProviderResponse(
                text="YES" if judged else "NO", yes_probability=p_yes, no_probability=p_no
            )
        raise OracleError("oracle does not recognize this prompt shape")

    def _yes_no(self, prompt: str) -> tuple[float, float]:
        judged = self._try_judge(prompt)
        if judged is None:
            raise OracleError("prompt is not an edge-filter question")
        return self._probabilities(prompt, judged)

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        return [self.world.embedding(text) for text in texts]

    # -- answers ----------------------------------------------------------------

    def _probabilities(self, prompt: str, judged: bool) -> tuple[float, float]:
        jitter = _unit_interval(self.seed, "jitter", prompt_digest(prompt)) * 0.02
        if judged:
            return 0.94 + jitter, 0.03 + jitter / 2
        return 0.03 + jitter / 2, 0.94 + jitter

    def _answer_extraction(self, prompt: str) -> str:
        match = re.search(r"# Product:\n(.*?)\n\n# Extraction:", prompt, re.DOTALL)
        if not match:
            raise OracleError("extraction prompt lacks a product block")
        title = match.group(1).split("\n", 1)[0].strip()
        entry = self.world.entity_entry(title)
        if entry is None or entry.kind != "product":
            raise OracleError(f"unknown product title {title!r}")
        profile = self.world.profile_of_product(entry.index)
        pid = self.world.product_ids[entry.index]
        segments = []
        for name in self.params.feature_types:
            subset_key = f"feature:{name}"
            variant = _h(self.seed, "xvar", pid, name) % self.params.surface_forms
            segments.append(f"{name}: {self.world.surface_text(subset_key, profile.features[name], variant)}")
        return "; ".join(segments) + "."

    def _answer_reasoning(self, prompt: str) -> str:
        queries = _QUERY_LINE.findall(prompt)
        titles = _TITLE_LINE.findall(prompt)
        questions = _QUESTION_LINE.findall(prompt)
        if not queries or not titles or not questions:
            raise OracleError("reasoning prompt lacks query/title/question lines")
        query_text, title, question = queries[-1].strip(), titles[-1].strip(), questions[-1].strip()
        scope = None
        for candidate in self.params.scopes:
            if question == reasoning_question(candidate):
                scope = candidate
                break
        if scope is None:
            raise OracleError(f"cannot map question {question!r} to a scope")
        q_entry = self.world.entity_entry(query_text)
        p_entry = self.world.entity_entry(title)
        if q_entry is None or q_entry.kind != "query" or p_entry is None or p_entry.kind != "product":
            raise OracleError("reasoning prompt references unknown entities")
        profile = self.world.profile_of_product(p_entry.index)
        qid = self.world.query_ids[q_entry.index]
        pid = self.world.product_ids[p_entry.index]
        s = self.params.surface_forms
        utility = self.world.surface_text(
            f"utility:{scope}", profile.utilities[scope], _h(self.seed, "u", qid, pid, scope) % s
        )
        need = self.world.surface_text(
            "need:need", profile.needs[scope], _h(self.seed, "n", qid, pid, scope) % s
        )
        stem = reasoning_answer_stem(scope)
        lines = [f"A1: {stem} [{utility}], which satisfies user's intention of [{need}]."]
        if _unit_interval(self.seed, "decoy", qid, pid, scope) < self.params.decoy_rate:
            decoy_utility = self.world.decoy_text(f"utility:{scope}", profile.utilities[scope])
            decoy_need = self.world.decoy_text("need:need", profile.needs[scope])
            lines.append(
                f"A2: {stem} [{decoy_utility}], which satisfies user's intention of [{decoy_need}]."
            )
        return "\n".join(lines)

    def _answer_summarize(self, prompt: str) -> str:
        lists = _PHRASE_LIST_LINE.findall(prompt)
        if not lists:
            raise OracleError("summarize prompt lacks a phrase list")
        members = [m.strip() for m in lists[-1].split(",")]
        return self.world.summarize_members(members)

    def _try_judge(self, prompt: str) -> bool | None:
        last_line = prompt.strip().split("\n")[-1].strip()
        for pattern, _, subset_kind, fixed_tag in _FILTER_LINE_PATTERNS:
            match = pattern.match(last_line)
            if not match:
                continue
            tag = fixed_tag if fixed_tag is not None else match.group("tag")
            subset_key = f"{subset_kind}:{tag}"
            return self.world.judge_edge(match.group("entity"), subset_key, match.group("factor"))
        return None
