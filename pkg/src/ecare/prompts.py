"""Prompt templates and deterministic rendering.

Templates are plain strings with named ``{placeholder}`` slots. Rendering is
a single-pass substitution so braces inside bound values are never
re-expanded. The registry instantiates one template per task: feature
extraction, per-scope need/utility reasoning, cluster summarization, and one
edge-filter template per (entity kind, subset) class.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")

KNOWN_PLACEHOLDERS = frozenset({"query", "product", "extraction_response", "factor", "factors"})


class PromptError(Exception):
    """Base class for template errors."""


class UnknownTemplateError(PromptError):
    pass


class UnboundPlaceholderError(PromptError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt body with named placeholders."""

    template_id: str
    body: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.body))

    def render(self, bindings: dict[str, str]) -> str:
        missing = self.placeholders - set(bindings)
        if missing:
            raise UnboundPlaceholderError(
                f"template {self.template_id!r}: unbound placeholders {sorted(missing)}"
            )

        def substitute(match: re.Match) -> str:
            return str(bindings[match.group(1)])

        return _PLACEHOLDER.sub(substitute, self.body)


_FILTER_INSTRUCTION = (
    "# Instruction:\n"
    "You are a labeling assistant, helping to clean invalid data. Please answer the "
    "following questions correctly. If correct, return YES, otherwise return NO.\n"
    "Just return YES or NO, don't return anything else.\n"
)

REASONING_QUESTIONS = {
    "who": "who will use <product>?",
    "where_when": "where or when will <product> be used?",
    "why": "why does the user need <product>?",
}

REASONING_ANSWER_STEMS = {
    "who": "<product> will be used by",
    "where_when": "<product> will be used at",
    "why": "<product> serves the purpose of",
}


def reasoning_question(scope: str) -> str:
    return REASONING_QUESTIONS.get(
        scope, f"in terms of {scope}, how does <product> satisfy the user?"
    )


def reasoning_answer_stem(scope: str) -> str:
    return REASONING_ANSWER_STEMS.get(scope, "<product> provides")

_REASONING_EXAMPLES = {
    "who": (
        "# Example 1:\n"
        "<query>: bachelorette vinyl stickers\n"
        "<product>:\n"
        "title: Wedding Party Bridesmaid Vinyl Decal ONLY Set of 9 DIY Tumbler Cup "
        "Champagne Glasses Maid of Honor Gift (Metallic Gold)\n"
        "category: Wedding Accessories\n"
        "broad_category: Special Occasion Accessories\n"
        "target_audience: Wedding Party\n"
        "shape: Rectangular\n"
        "size: 3.8\" by 1.7\"\n"
        "style: Gold Metallic\n"
        "quantity: 9\n"
        "material: Adhesive Vinyl\n"
        "usage: Hand wash only, removable but not reusable\n"
        "compatibility: Hard surface\n"
        "included_accessories: Application Instructions\n"
        "Q: Given <query>, who will use <product>?\n"
        "A1: <product> will be used by [bridesmaid], which satisfies user's intention "
        "of [wedding decoration].\n"
        "A2: <product> will be used by [wedding planner], which satisfies user's "
        "intention of buying [wedding preparation].\n"
    ),
    "where_when": (
        "# Example 1:\n"
        "<query>: compact camping stove\n"
        "<product>:\n"
        "title: Single Burner Portable Butane Camp Stove with Carry Case\n"
        "category: Camping Stove\n"
        "usage: Outdoor cooking\n"
        "Q: Given <query>, where or when will <product> be used?\n"
        "A1: <product> will be used at [campsite], which satisfies user's intention "
        "of [outdoor cooking].\n"
        "A2: <product> will be used at [hiking trip], which satisfies user's "
        "intention of [lightweight gear].\n"
    ),
    "why": (
        "# Example 1:\n"
        "<query>: blue light blocking glasses\n"
        "<product>:\n"
        "title: Anti Eyestrain Computer Reading Glasses Blue Light Filter\n"
        "category: Eyewear\n"
        "usage: Screen work\n"
        "Q: Given <query>, why does the user need <product>?\n"
        "A1: <product> serves the purpose of [eye protection], which satisfies "
        "user's intention of [reducing eye strain].\n"
        "A2: <product> serves the purpose of [screen filtering], which satisfies "
        "user's intention of [comfortable screen time].\n"
    ),
}


def _reasoning_body(scope: str) -> str:
    question = reasoning_question(scope)
    stem = reasoning_answer_stem(scope)
    example = _REASONING_EXAMPLES.get(
        scope,
        (
            "# Example 1:\n"
            "<query>: sample query\n"
            "<product>:\n"
            "title: Sample Product\n"
            f"Q: Given <query>, {question}\n"
            f"A1: {stem} [a utility], which satisfies user's intention of [a need].\n"
        ),
    )
    return (
        "# Instruction:\n"
        "Given a <query> from user and the <product> that user clicked, your task is "
        "to answer the question in term of how user's <need> behind the <query> can "
        "be satisfied by <product>'s <utility>.\n"
        "The <need> and <utility> within the answer should be less than 4 words.\n"
        f"Answer should be about {scope.replace('_', ' or ')}.\n"
        "Return 1 answer as least, 2 at maximum.\n"
        "\n"
        f"{example}"
        "\n"
        "# Example 2:\n"
        "<query>: {query}\n"
        "<product>:\n"
        "title: {product}\n"
        "{extraction_response}\n"
        f"Q: Given <query>, {question}\n"
    )


_FILTER_QUESTIONS = {
    # (entity_kind, subset_kind, tag pattern) -> final question line.
    ("product", "utility", "who"): "The product '{product}' will be used by '{factor}'. Is this judgment reasonable?",
    ("product", "utility", "where_when"): "The product '{product}' will be used in the '{factor}' scenario. Is this reasonable?",
    ("product", "utility", "why"): "The product '{product}' will be used with the purpose of '{factor}'. Is this reasonable?",
    ("query", "utility", "who"): "The user searched for '{query}', which means the user is a '{factor}'. Is this reasonable?",
    ("query", "utility", "where_when"): "The user searched for '{query}', which indicates that the user's usage scenario is '{factor}'. Is this reasonable?",
    ("query", "utility", "why"): "The user searched for '{query}', which indicates that the user's purpose is '{factor}'. Is this reasonable?",
    ("product", "need", "need"): "The product '{product}' satisfies the need of '{factor}'. Is this reasonable?",
    ("query", "need", "need"): "The user searched for '{query}', which means the user's need is '{factor}'. Is this reasonable?",
}

_FILTER_EXAMPLES = {
    ("product", "utility", "who"): (
        "The product 'Jimmy Choo womens handbag white leather grained mini satchel' "
        "will be used by 'students'. Is this judgment reasonable? NO\n"
        "The product 'Rumikrafts Handmade Floral Trinket box heart shaped, Valentine "
        "gift for her' will be used by 'jewelley owner'. Is this judgment reasonable? YES\n"
    ),
    ("product", "utility", "where_when"): (
        "The product 'French A1 to B2: A complete guide' will be used in the "
        "'language learning' scenario. Is this reasonable? YES\n"
        "The product 'Arcteryx snow sports cargo pants XX_Large 32' will be used in "
        "the 'hiking' scenario. Is this reasonable? NO\n"
    ),
    ("query", "utility", "who"): (
        "The user searched for 'Electronic drum set for kids', which means the user "
        "is a 'beginner'. Is this reasonable? YES\n"
        "The user searched for 'Arcteryx snow sports cargo pants', which means the "
        "user is a 'beach lover'. Is this reasonable? NO\n"
    ),
    ("query", "utility", "where_when"): (
        "The user searched for '#2 pencils HB wood cased', indicating that the "
        "user's usage scenario is 'going out'. Is this reasonable? NO\n"
        "The user searched for '#2 pencils HB wood cased', indicating that the "
        "user's usage scenario is 'classroom'. Is this reasonable? YES\n"
    ),
}

_GENERIC_FILTER_EXAMPLES = {
    "product": (
        "The product 'Stainless steel insulated water bottle 750ml' matches "
        "'hydration on the go'. Is this reasonable? YES\n"
        "The product 'Stainless steel insulated water bottle 750ml' matches "
        "'office chair'. Is this reasonable? NO\n"
    ),
    "query": (
        "The user searched for 'waterproof hiking boots', which relates to "
        "'outdoor footwear'. Is this reasonable? YES\n"
        "The user searched for 'waterproof hiking boots', which relates to "
        "'kitchen appliance'. Is this reasonable? NO\n"
    ),
}


def _filter_body(entity_kind: str, subset_kind: str, tag: str) -> str:
    question = _FILTER_QUESTIONS.get((entity_kind, subset_kind, tag))
    if question is None and subset_kind == "utility":
        if entity_kind == "product":
            question = (
                f"The product '{{product}}' provides the {tag} utility of "
                "'{factor}'. Is this reasonable?"
            )
        else:
            question = (
                f"The user searched for '{{query}}', which relates to the {tag} "
                "utility of '{factor}'. Is this reasonable?"
            )
    if question is None and subset_kind == "feature":
        if entity_kind == "product":
            question = f"The product '{{product}}' has {tag} of '{{factor}}'. Is this reasonable?"
        else:
            question = (
                f"The user searched for '{{query}}', which matches products whose "
                f"{tag} is '{{factor}}'. Is this reasonable?"
            )
    if question is None:
        raise PromptError(f"no filter question for class {entity_kind}:{subset_kind}:{tag}")
    examples = _FILTER_EXAMPLES.get(
        (entity_kind, subset_kind, tag), _GENERIC_FILTER_EXAMPLES[entity_kind]
    )
    return f"{_FILTER_INSTRUCTION}\n# examples:\n{examples}\n{question}"


_CLUSTER_SUMMARIZE_BODY = (
    "# Instruction:\n"
    "1. Use a summary phrase to summarize the provided phrase list.\n"
    "2. The general phrase should be less than 2 words.\n"
    "3. Only the general phrase part is output, but the phrase list part is not output.\n"
    "\n"
    "# Example 1:\n"
    "- Phrase List: [slip on shoes, loafer shoes]\n"
    "- General phrase: slip-on loafer\n"
    "\n"
    "# Example 2:\n"
    "- Phrase List: [cotton t-shirt, breathable t-shirt, t-shirt made of cotton]\n"
    "- General phrase: breathable cotton t-shirt\n"
    "\n"
    "# Example 3:\n"
    "- Phrase List: {factors}\n"
    "- General phrase:"
)


def _extraction_body(feature_types: list[tuple[str, str]]) -> str:
    lines = "\n".join(f"- {name}: {description}" for name, description in feature_types)
    return (
        "# Instruction:\n"
        "Extract the following feature types from the product text. Answer with "
        "one 'name: value' segment per extracted feature, separated by semicolons. "
        "Skip feature types that the text does not support.\n"
        "\n"
        "# Feature types:\n"
        f"{lines}\n"
        "\n"
        "# Product:\n"
        "{product}\n"
        "\n"
        "# Extraction:\n"
    )


class TemplateRegistry:
    """Holds every template the pipeline renders, keyed by template id."""

    def __init__(self, feature_types: list[tuple[str, str]], scopes: list[str]) -> None:
        self.feature_types = list(feature_types)
        self.scopes = list(scopes)
        self._templates: dict[str, PromptTemplate] = {}
        self._register("feature_extraction", _extraction_body(self.feature_types))
        for scope in self.scopes:
            self._register(f"reasoning_{scope}", _reasoning_body(scope))
        self._register("cluster_summarize", _CLUSTER_SUMMARIZE_BODY)
        for entity_kind in ("query", "product"):
            self._register(
                f"filter_{entity_kind}_need_need", _filter_body(entity_kind, "need", "need")
            )
            for scope in self.scopes:
                self._register(
                    f"filter_{entity_kind}_utility_{scope}",
                    _filter_body(entity_kind, "utility", scope),
                )
            for name, _ in self.feature_types:
                self._register(
                    f"filter_{entity_kind}_feature_{name}",
                    _filter_body(entity_kind, "feature", name),
                )

    def _register(self, template_id: str, body: str) -> None:
        self._templates[template_id] = PromptTemplate(template_id=template_id, body=body)

    def get(self, template_id: str) -> PromptTemplate:
        template = self._templates.get(template_id)
        if template is None:
            raise UnknownTemplateError(f"unknown template {template_id!r}")
        return template

    def template_ids(self) -> list[str]:
        return sorted(self._templates)

    def render(self, template_id: str, bindings: dict[str, str]) -> str:
        return self.get(template_id).render(bindings)


def render_prompt(
    registry: TemplateRegistry, template_id: str, bindings: dict[str, str]
) -> str:
    """Render a registry template; deterministic, byte-stable output."""
    return registry.render(template_id, bindings)
