import random

import pytest

from cptkit.errors import (
    DegenerateOrderError,
    EmptyCorpusError,
    EmptyDocumentError,
    EmptyScoresError,
    InvalidParameterError,
)
from cptkit.quality import (
    corpus_perplexity,
    deserialize_model,
    load_model,
    perplexity,
    quartile_filter,
    quartile_filter_by_group,
    save_model,
    serialize_model,
    train_ngram,
)

from oracles import BruteForceKN, sort_and_slice

TOY_SENTENCES = [
    ["the", "cat", "sat", "on", "the", "mat"],
    ["the", "cat", "sat", "on", "the", "rug"],
    ["a", "dog", "sat", "on", "a", "rug"],
]


class TestTraining:
    def test_single_symbol_unigram(self):
        model = train_ngram([["a", "a", "a", "a"]], order=1)
        # nearly all mass on "a"; the rest is boundary and unknown smoothing
        assert model.prob("a") > 0.7
        total = sum(model.prob(w) for w in model.prediction_vocab())
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_bigram_matches_hand_expanded_recursion(self):
        corpus = [["a", "b", "a", "b"]]
        model = train_ngram(corpus, order=2)
        oracle = BruteForceKN(corpus, 2)
        # frozen from the oracle expansion of this 4-token corpus
        assert oracle.prob("b", ("a",)) == pytest.approx(0.765625, rel=1e-12)
        assert model.prob("b", ("a",)) == pytest.approx(oracle.prob("b", ("a",)), rel=1e-12)

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            train_ngram([], order=2)
        with pytest.raises(EmptyCorpusError):
            train_ngram([[]], order=2)

    def test_degenerate_order(self):
        with pytest.raises(DegenerateOrderError):
            train_ngram([["a"]], order=0)

    def test_deterministic_digest(self):
        m1 = train_ngram(TOY_SENTENCES, order=3)
        m2 = train_ngram(TOY_SENTENCES, order=3)
        assert m1.digest() == m2.digest()


class TestProbabilities:
    @pytest.mark.parametrize("order", [1, 2, 3, 4, 5])
    def test_matches_brute_force_all_orders(self, order):
        model = train_ngram(TOY_SENTENCES, order=order)
        oracle = BruteForceKN(TOY_SENTENCES, order)
        contexts = [(), ("the",), ("the", "cat"), ("sat", "on"), ("zz",), ("on", "a")]
        for ctx in contexts:
            for tok in model.prediction_vocab() + ["zz"]:
                assert model.prob(tok, ctx) == pytest.approx(
                    oracle.prob(tok, ctx), rel=1e-9
                ), (order, ctx, tok)

    def test_normalization_sampled_contexts(self):
        model = train_ngram(TOY_SENTENCES, order=3)
        vocab = model.prediction_vocab()
        rng = random.Random(11)
        pool = [t for s in TOY_SENTENCES for t in s] + ["zz", "<unk>"]
        for _ in range(100):
            ctx = tuple(rng.choice(pool) for _ in range(rng.randint(0, 3)))
            total = sum(model.prob(w, ctx) for w in vocab)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_all_probabilities_positive(self):
        model = train_ngram(TOY_SENTENCES, order=4)
        for tok in model.prediction_vocab() + ["never-seen"]:
            assert model.prob(tok, ("never", "seen", "context")) > 0.0


class TestPerplexity:
    def test_training_document_is_predictable(self):
        model = train_ngram([["a", "a", "a", "a"]], order=2)
        assert perplexity(model, ["a", "a", "a", "a"]) < 2.0

    def test_all_unknown_finite(self):
        model = train_ngram(TOY_SENTENCES, order=3)
        ppl = perplexity(model, ["qq", "ww", "ee"])
        assert ppl > 1.0
        assert ppl < float("inf")

    def test_matches_brute_force(self):
        model = train_ngram(TOY_SENTENCES, order=3)
        oracle = BruteForceKN(TOY_SENTENCES, 3)
        for doc in (TOY_SENTENCES[0], ["a", "dog"], ["zz", "the", "cat"]):
            assert perplexity(model, doc) == pytest.approx(oracle.perplexity(doc), rel=1e-9)

    def test_empty_document(self):
        model = train_ngram(TOY_SENTENCES, order=2)
        with pytest.raises(EmptyDocumentError):
            perplexity(model, [])

    def test_monotone_fit_with_order(self):
        corpus = [["a", "b", "c"] * 6, ["a", "b", "c"] * 4]
        ppls = [corpus_perplexity(train_ngram(corpus, order=k), corpus) for k in range(1, 6)]
        assert all(high >= low - 1e-9 for high, low in zip(ppls, ppls[1:]))

    def test_per_line_scoring_pools_events(self):
        model = train_ngram(TOY_SENTENCES, order=3)
        pooled = corpus_perplexity(model, TOY_SENTENCES[:2])
        assert pooled > 0.0


class TestQuartileFilter:
    def test_bottom_quarter_of_eight(self):
        scores = [(f"d{i}", float(i)) for i in range(1, 9)]
        manifest = quartile_filter(scores, 0.25)
        assert manifest.selected == ("d1", "d2")
        assert manifest.threshold == 2.0

    def test_ties_broken_by_id(self):
        scores = [(f"d{i}", 5.0) for i in range(8)]
        manifest = quartile_filter(scores, 0.25)
        assert manifest.selected == ("d0", "d1")

    def test_random_scores_match_sort_oracle(self):
        rng = random.Random(3)
        scores = [(f"doc{i:04d}", rng.uniform(1, 1000)) for i in range(1000)]
        manifest = quartile_filter(scores, 0.25)
        assert list(manifest.selected) == sort_and_slice(scores, 0.25)
        assert len(manifest.selected) == 250

    def test_full_quartile_selects_all(self):
        scores = [("a", 2.0), ("b", 1.0), ("c", 3.0)]
        manifest = quartile_filter(scores, 1.0)
        assert manifest.selected == ("a", "b", "c")

    def test_selected_dominate_unselected(self):
        rng = random.Random(5)
        scores = [(f"d{i}", rng.choice([1.0, 2.0, 3.0])) for i in range(40)]
        manifest = quartile_filter(scores, 0.25)
        unselected = {i for i, _ in scores} - set(manifest.selected)
        by_id = dict(scores)
        worst_selected = max(by_id[i] for i in manifest.selected)
        assert all(by_id[i] >= worst_selected for i in unselected)

    def test_empty_scores(self):
        with pytest.raises(EmptyScoresError):
            quartile_filter([], 0.25)

    def test_per_group_selection(self):
        scores = [(f"a{i}", float(i), "snap_a") for i in range(8)]
        scores += [(f"b{i}", float(100 + i), "snap_b") for i in range(8)]
        manifest = quartile_filter_by_group(scores, 0.25)
        # global selection would take 4 docs from group a; per-group takes 2+2
        assert manifest.selected == ("a0", "a1", "b0", "b1")
        assert manifest.threshold is None

    def test_invalid_quartile(self):
        with pytest.raises(InvalidParameterError):
            quartile_filter([("a", 1.0)], 0.0)


class TestSerialization:
    def test_roundtrip_preserves_probabilities(self, tmp_path):
        model = train_ngram(TOY_SENTENCES, order=3)
        path = tmp_path / "model.bin"
        digest = save_model(model, str(path))
        loaded = load_model(str(path))
        assert loaded.digest() == digest == model.digest()
        for ctx in ((), ("the",), ("the", "cat")):
            for tok in model.prediction_vocab():
                assert loaded.prob(tok, ctx) == model.prob(tok, ctx)

    def test_rejects_garbage(self):
        with pytest.raises(InvalidParameterError):
            deserialize_model(b"not a model")

    def test_serialization_is_byte_stable(self):
        m1 = train_ngram(TOY_SENTENCES, order=2)
        m2 = train_ngram(TOY_SENTENCES, order=2)
        assert serialize_model(m1) == serialize_model(m2)
