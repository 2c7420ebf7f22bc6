import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecare.extraction import DEFAULT_FEATURE_SCHEMA
from ecare.prompts import (
    PromptTemplate,
    TemplateRegistry,
    UnboundPlaceholderError,
    UnknownTemplateError,
    render_prompt,
)

FULL_SCHEMA = [(s.name, s.description) for s in DEFAULT_FEATURE_SCHEMA]
SCOPES = ["where_when", "why", "who"]


@pytest.fixture(scope="module")
def registry():
    return TemplateRegistry(FULL_SCHEMA, SCOPES)


class TestRendering:
    def test_substitution_is_single_pass(self):
        template = PromptTemplate("t", "value: {factor}")
        assert template.render({"factor": "{query}"}) == "value: {query}"

    def test_unbound_placeholder_rejected(self):
        template = PromptTemplate("t", "{query} and {factor}")
        with pytest.raises(UnboundPlaceholderError, match="factor"):
            template.render({"query": "x"})

    def test_unknown_template_rejected(self, registry):
        with pytest.raises(UnknownTemplateError):
            registry.render("no_such_template", {})

    def test_byte_stable(self, registry):
        bindings = {"query": "a", "factor": "b"}
        first = registry.render("filter_query_need_need", bindings)
        second = registry.render("filter_query_need_need", bindings)
        assert first == second

    @settings(max_examples=30, deadline=None)
    @given(
        st.dictionaries(
            st.sampled_from(["query", "factor"]),
            st.text(alphabet="abcdefgh ", min_size=1, max_size=12),
            min_size=2,
            max_size=2,
        ),
        st.dictionaries(
            st.sampled_from(["query", "factor"]),
            st.text(alphabet="abcdefgh ", min_size=1, max_size=12),
            min_size=2,
            max_size=2,
        ),
    )
    def test_injective_in_bindings(self, registry, left, right):
        rendered_left = registry.render("filter_query_need_need", left)
        rendered_right = registry.render("filter_query_need_need", right)
        if left != right:
            assert rendered_left != rendered_right
        else:
            assert rendered_left == rendered_right


class TestReasoningTemplates:
    def test_who_contains_question(self, registry):
        prompt = registry.render(
            "reasoning_who",
            {
                "query": "bachelorette vinyl stickers",
                "product": "Wedding Party Bridesmaid Vinyl Decal ONLY Set of 9 DIY "
                "Tumbler Cup Champagne Glasses Maid of Honor Gift (Metallic Gold)",
                "extraction_response": "category: wedding accessories",
            },
        )
        assert "who will use <product>?" in prompt
        assert "bachelorette vinyl stickers" in prompt
        assert prompt.count("category: wedding accessories") == 1

    def test_each_scope_has_template(self, registry):
        for scope in SCOPES:
            prompt = registry.render(
                f"reasoning_{scope}",
                {"query": "q", "product": "p", "extraction_response": ""},
            )
            assert "Q: Given <query>," in prompt

    def test_custom_scope_uses_generic_question(self):
        registry = TemplateRegistry(FULL_SCHEMA, ["budget"])
        prompt = registry.render(
            "reasoning_budget", {"query": "q", "product": "p", "extraction_response": ""}
        )
        assert "in terms of budget" in prompt


class TestFilterTemplates:
    def test_product_who_final_question(self, registry):
        prompt = registry.render("filter_product_utility_who", {"product": "X", "factor": "Y"})
        assert prompt.endswith("The product 'X' will be used by 'Y'. Is this judgment reasonable?")

    def test_query_where_when_wording(self, registry):
        prompt = registry.render(
            "filter_query_utility_where_when", {"query": "Q", "factor": "F"}
        )
        assert prompt.endswith(
            "The user searched for 'Q', which indicates that the user's usage scenario "
            "is 'F'. Is this reasonable?"
        )

    def test_feature_templates_mention_type(self, registry):
        prompt = registry.render(
            "filter_product_feature_category", {"product": "X", "factor": "Y"}
        )
        assert "has category of 'Y'" in prompt

    def test_all_classes_present(self, registry):
        ids = registry.template_ids()
        for entity in ("query", "product"):
            assert f"filter_{entity}_need_need" in ids
            for scope in SCOPES:
                assert f"filter_{entity}_utility_{scope}" in ids
            for name, _ in FULL_SCHEMA:
                assert f"filter_{entity}_feature_{name}" in ids


class TestSummarizeTemplate:
    def test_factors_slot_appears_once(self, registry):
        prompt = registry.render("cluster_summarize", {"factors": "[a, b]"})
        assert prompt.count("[a, b]") == 1
        assert prompt.rstrip().endswith("- General phrase:")

    def test_contains_exemplar(self, registry):
        prompt = registry.render("cluster_summarize", {"factors": "[x]"})
        assert "slip-on loafer" in prompt


def test_render_prompt_helper(registry):
    assert render_prompt(registry, "cluster_summarize", {"factors": "[z]"}).count("[z]") == 1
