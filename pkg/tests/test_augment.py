import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecare.augment import (
    AugmentError,
    AugmentationTemplate,
    HeadConfig,
    classify_relevance,
    compose_augmentation,
    augment_product,
    export_augmented_dataset,
    pair_features,
    train_relevance_head,
)


TEMPLATE = AugmentationTemplate()


class TestCompose:
    def test_empty_factor_map_is_identity(self):
        assert compose_augmentation("base text", {}, TEMPLATE) == "base text"
        assert compose_augmentation("base text", {"feature:category": []}, TEMPLATE) == "base text"

    def test_case_study_phrasing(self):
        text = compose_augmentation(
            "100% organic, pure without any mix.",
            {
                "feature:category": ["food", "beverages"],
                "feature:style": ["natural", "plant-based"],
            },
            TEMPLATE,
        )
        assert text.startswith("100% organic, pure without any mix.")
        assert "belongs to categories of [food, beverages], has style of [natural, plant-based]" in text

    def test_template_order_respected(self):
        text = compose_augmentation(
            "q",
            {
                "utility:who": ["runner"],
                "feature:category": ["shoes"],
                "need:need": ["comfort"],
            },
            TEMPLATE,
        )
        assert text.index("belongs to categories of") < text.index("with intention of")
        assert text.index("with intention of") < text.index("can be used by")

    def test_unlisted_subset_gets_fallback_phrase(self):
        text = compose_augmentation("q", {"utility:budget": ["cheap"]}, TEMPLATE)
        assert "related to [cheap]" in text

    def test_base_text_never_altered(self):
        base = "Original, text! with punctuation?"
        text = compose_augmentation(base, {"need:need": ["a"]}, TEMPLATE)
        assert text.startswith(base)

    def test_product_augmentation_between_title_and_description(self):
        text = augment_product(
            "The Title", "The rest of the description.", {"feature:category": ["shoes"]}, TEMPLATE
        )
        title_end = text.index("The Title") + len("The Title")
        assert text.index("belongs to categories of [shoes]") > title_end
        assert text.index("belongs to categories of [shoes]") < text.index(
            "The rest of the description."
        )

    @settings(max_examples=30, deadline=None)
    @given(
        st.dictionaries(
            st.sampled_from(["feature:category", "need:need", "utility:who"]),
            st.lists(st.text(alphabet="abcde", min_size=1, max_size=5), min_size=1, max_size=3),
            max_size=3,
        ),
        st.dictionaries(
            st.sampled_from(["feature:category", "need:need", "utility:who"]),
            st.lists(st.text(alphabet="abcde", min_size=1, max_size=5), min_size=1, max_size=3),
            max_size=3,
        ),
    )
    def test_injective_in_factor_content(self, left, right):
        rendered_left = compose_augmentation("base", left, TEMPLATE)
        rendered_right = compose_augmentation("base", right, TEMPLATE)
        if rendered_left == rendered_right:
            assert {k: v for k, v in left.items() if v} == {k: v for k, v in right.items() if v}


def separable_embedding_table(n_per_class=40, dim=8, seed=0):
    """Two linearly separable clusters of (query, product) pair texts."""
    rng = np.random.default_rng(seed)
    table = {}
    pairs = []
    for i in range(n_per_class):
        for label, center in (("Exact", 1.0), ("Irrelevant", -1.0)):
            q_text, p_text = f"q {label} {i}", f"p {label} {i}"
            table[q_text] = rng.normal(size=dim) * 0.1 + center
            table[p_text] = rng.normal(size=dim) * 0.1 + center
            pairs.append((q_text, p_text, label))
    return table, pairs


def lookup_embed(table):
    def embed(texts):
        return [np.asarray(table[t], dtype=float) for t in texts]

    return embed


class TestRelevanceHead:
    def test_pair_features_shape(self):
        q, p = np.ones(4), np.arange(4.0)
        feats = pair_features(q, p)
        assert feats.shape == (16,)
        assert np.allclose(feats[8:12], q * p)
        assert np.allclose(feats[12:], np.abs(q - p))

    def test_separable_data_reaches_full_training_accuracy(self):
        table, pairs = separable_embedding_table()
        config = HeadConfig(hidden_dims=(16,), epochs=50, learning_rate=1e-2, seed=5)
        head = train_relevance_head(pairs, config, lookup_embed(table))
        correct = 0
        for q, p, label in pairs:
            _, predicted = classify_relevance(head, q, p, lookup_embed(table))
            correct += predicted == label
        assert correct == len(pairs)

    def test_heldout_accuracy_on_separable_data(self):
        table, pairs = separable_embedding_table(n_per_class=60, seed=1)
        train, test = pairs[:80], pairs[80:]
        config = HeadConfig(hidden_dims=(16,), epochs=50, learning_rate=1e-2, seed=5)
        head = train_relevance_head(train, config, lookup_embed(table))
        correct = sum(
            classify_relevance(head, q, p, lookup_embed(table))[1] == label
            for q, p, label in test
        )
        assert correct / len(test) >= 0.95

    def test_deterministic_given_seed(self):
        table, pairs = separable_embedding_table(n_per_class=10)
        config = HeadConfig(hidden_dims=(8,), epochs=10, seed=7)
        a = train_relevance_head(pairs, config, lookup_embed(table))
        b = train_relevance_head(pairs, config, lookup_embed(table))
        for (w1, b1), (w2, b2) in zip(a.params, b.params):
            assert np.array_equal(w1, w2) and np.array_equal(b1, b2)

    def test_distribution_sums_to_one(self):
        table, pairs = separable_embedding_table(n_per_class=5)
        config = HeadConfig(hidden_dims=(8,), epochs=1, seed=7)
        head = train_relevance_head(pairs, config, lookup_embed(table))
        dist, _ = classify_relevance(head, pairs[0][0], pairs[0][1], lookup_embed(table))
        assert sum(dist.values()) == pytest.approx(1.0, abs=1e-6)

    def test_single_class_rejected(self):
        table, pairs = separable_embedding_table(n_per_class=3)
        only = [p for p in pairs if p[2] == "Exact"]
        with pytest.raises(AugmentError, match="2 classes"):
            train_relevance_head(only, HeadConfig(), lookup_embed(table))

    def test_empty_text_rejected(self):
        table, pairs = separable_embedding_table(n_per_class=3)
        head = train_relevance_head(pairs, HeadConfig(epochs=1), lookup_embed(table))
        with pytest.raises(AugmentError):
            classify_relevance(head, "", "x", lookup_embed(table))


class TestAugmentationLiftsSharedFactorPairs:
    def test_augmentation_raises_heldout_true_class_probability(self, small_oracle):
        """Factor augmentation bridges query and product text spaces.

        The plain pair (query, product details) carries no usable signal for
        unseen queries; appending shared canonical factors to both sides
        makes matching pairs separable.
        """
        world = small_oracle.world
        params = small_oracle.params

        def canonical_factors(profile):
            return {
                "feature:category": [world.canonical_text("feature:category", profile.features["category"])],
                "need:need": sorted(
                    world.canonical_text("need:need", latent)
                    for latent in set(profile.needs.values())
                ),
                "utility:who": [world.canonical_text("utility:who", profile.utilities["who"])],
            }

        def build_rows(augmented: bool):
            rows = []
            for q_idx in range(params.n_queries):
                profile = world.profile_of_query(q_idx)
                group_products = world.relevant_products(q_idx)
                for offset, pid in enumerate(group_products):
                    pos_idx = world.product_ids.index(pid)
                    neg_idx = (pos_idx + params.group_size) % params.n_products
                    for p_idx, label in ((pos_idx, "Exact"), (neg_idx, "Irrelevant")):
                        q_text = world.query_texts[q_idx]
                        p_text = f"details {world.product_ids[p_idx]} {world.product_descriptions[p_idx]}"
                        if augmented:
                            q_text = compose_augmentation(q_text, canonical_factors(profile), TEMPLATE)
                            p_text = compose_augmentation(
                                p_text,
                                canonical_factors(world.profile_of_product(p_idx)),
                                TEMPLATE,
                            )
                        rows.append((q_idx, q_text, p_text, label))
            return rows

        config = HeadConfig(hidden_dims=(32,), epochs=60, learning_rate=3e-3, seed=3)
        heldout_queries = {params.n_queries - 1, params.n_queries - 2}

        def heldout_true_class_probability(rows):
            train = [(q, p, y) for idx, q, p, y in rows if idx not in heldout_queries]
            test = [(q, p, y) for idx, q, p, y in rows if idx in heldout_queries]
            head = train_relevance_head(train, config, small_oracle.embed)
            probs = []
            for q, p, label in test:
                dist, _ = classify_relevance(head, q, p, small_oracle.embed)
                probs.append(dist[label])
            return float(np.mean(probs))

        plain = heldout_true_class_probability(build_rows(augmented=False))
        augmented = heldout_true_class_probability(build_rows(augmented=True))
        assert augmented > plain
        assert augmented > 0.6


class TestExport:
    def test_jsonl_fields(self, tmp_path):
        rows = [
            {
                "query_id": "q1",
                "product_id": "p1",
                "augmented_query": "aq",
                "augmented_product": "ap",
                "label": "Exact",
                "extra": "dropped",
            }
        ]
        path = tmp_path / "aug.jsonl"
        export_augmented_dataset(rows, path)
        import json

        record = json.loads(path.read_text().strip())
        assert record == {
            "query_id": "q1",
            "product_id": "p1",
            "augmented_query": "aq",
            "augmented_product": "ap",
            "label": "Exact",
        }
