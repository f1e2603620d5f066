import numpy as np
import pytest

from cptkit.blend import DataSource, SourceRegistry, normalize
from cptkit.errors import (
    DimensionMismatchError,
    EmbeddingFormatError,
    EmptyMiningResultError,
    InvalidParameterError,
    MissingDocumentError,
    OutOfRangeError,
)
from cptkit.mining import (
    build_index,
    emit_mined_blend,
    knn,
    load_embedding_set,
    make_embedding_set,
    mine,
    write_embedding_set,
)
from cptkit.sampler import DocumentRegistry, synthetic_inventory

from oracles import naive_knn


def random_set(n, d, seed, prefix="doc"):
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(n, d)).astype(np.float32)
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    return make_embedding_set(ids, vectors)


class TestIndex:
    def test_single_vector(self):
        emb = make_embedding_set(["only"], np.ones((1, 4), dtype=np.float32))
        index = build_index(emb)
        assert index.size == 1
        assert knn(index, np.ones(4), 1)[0][0] == "only"

    def test_non_finite_rejected(self):
        vectors = np.ones((3, 4), dtype=np.float32)
        vectors[1, 2] = np.nan
        emb = make_embedding_set(["a", "b", "c"], vectors)
        with pytest.raises(InvalidParameterError, match="'b'"):
            build_index(emb)

    def test_zero_norm_rejected_under_cosine(self):
        vectors = np.ones((2, 4), dtype=np.float32)
        vectors[1] = 0.0
        emb = make_embedding_set(["a", "b"], vectors)
        with pytest.raises(InvalidParameterError, match="zero-norm"):
            build_index(emb, metric="cosine")
        build_index(emb, metric="inner_product")  # fine without normalization

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InvalidParameterError):
            make_embedding_set(["x", "x"], np.ones((2, 3), dtype=np.float32))


class TestKnn:
    def test_self_similarity_rank_one(self):
        emb = random_set(200, 16, seed=0)
        index = build_index(emb)
        for i in (0, 57, 199):
            hits = knn(index, emb.vectors[i], 5)
            assert hits[0][0] == emb.ids[i]
            assert hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_k_equals_n_fully_ordered(self):
        emb = random_set(40, 8, seed=1)
        index = build_index(emb)
        hits = knn(index, emb.vectors[3], 40)
        assert len(hits) == 40
        scores = [s for _, s in hits]
        assert scores == sorted(scores, reverse=True)
        assert {i for i, _ in hits} == set(emb.ids)

    def test_matches_naive_oracle(self):
        emb = random_set(2000, 32, seed=2)
        index = build_index(emb, block_rows=256)  # force multi-block merging
        rng = np.random.default_rng(3)
        for _ in range(20):
            query = rng.normal(size=32)
            hits = knn(index, query, 25)
            expected = naive_knn(list(emb.ids), emb.vectors, query, 25)
            assert [i for i, _ in hits] == [i for i, _ in expected]
            for (_, got), (_, want) in zip(hits, expected):
                assert got == pytest.approx(want, rel=1e-6)

    def test_tied_scores_break_by_id(self):
        base = np.ones((5, 4), dtype=np.float32)
        emb = make_embedding_set(["e", "c", "a", "d", "b"], base)
        index = build_index(emb)
        hits = knn(index, np.ones(4), 3)
        assert [i for i, _ in hits] == ["a", "b", "c"]

    def test_k_out_of_range(self):
        emb = random_set(10, 4, seed=4)
        index = build_index(emb)
        with pytest.raises(OutOfRangeError):
            knn(index, np.ones(4), 0)
        with pytest.raises(OutOfRangeError):
            knn(index, np.ones(4), 11)

    def test_dimension_mismatch(self):
        emb = random_set(10, 4, seed=5)
        index = build_index(emb)
        with pytest.raises(DimensionMismatchError):
            knn(index, np.ones(5), 2)

    def test_inner_product_metric(self):
        emb = random_set(500, 12, seed=6)
        index = build_index(emb, metric="inner_product")
        query = np.random.default_rng(7).normal(size=12)
        hits = knn(index, query, 10)
        expected = naive_knn(list(emb.ids), emb.vectors, query, 10, metric="inner_product")
        assert [i for i, _ in hits] == [i for i, _ in expected]


class TestMine:
    def corpus_registry(self, emb, tokens_each=10):
        docs = [(doc_id, tokens_each) for doc_id in emb.ids]
        from cptkit.sampler import DocumentEntry, Inventory

        inv = Inventory(
            source="corpus",
            docs=tuple(DocumentEntry(i, c, "synthetic") for i, c in docs),
        )
        return DocumentRegistry([inv])

    def test_small_corpus_fully_mined(self):
        corpus = random_set(3, 8, seed=8, prefix="c")
        qa = random_set(1, 8, seed=9, prefix="q")
        registry = self.corpus_registry(corpus, tokens_each=7)
        result = mine(qa, corpus, k=3, registry=registry)
        assert set(result.mined_ids) == set(corpus.ids)
        assert result.mined_tokens == 21

    def test_identical_queries_dedup(self):
        corpus = random_set(100, 8, seed=10, prefix="c")
        rng = np.random.default_rng(11)
        vec = rng.normal(size=8).astype(np.float32)
        qa = make_embedding_set(["q1", "q2"], np.stack([vec, vec]))
        result = mine(qa, corpus, k=5, registry=self.corpus_registry(corpus))
        assert len(result.mined_ids) == 5
        assert result.neighbors["q1"] == result.neighbors["q2"]

    def test_union_and_tokens_match_oracle(self):
        corpus = random_set(800, 16, seed=12, prefix="c")
        qa = random_set(30, 16, seed=13, prefix="q")
        registry = self.corpus_registry(corpus, tokens_each=3)
        result = mine(qa, corpus, k=20, registry=registry)
        union = set()
        for qi in range(len(qa.ids)):
            union.update(
                i for i, _ in naive_knn(list(corpus.ids), corpus.vectors, qa.vectors[qi], 20)
            )
        assert set(result.mined_ids) == union
        assert result.mined_tokens == 3 * len(union)

    def test_mined_set_monotone_in_k(self):
        corpus = random_set(300, 8, seed=14, prefix="c")
        qa = random_set(10, 8, seed=15, prefix="q")
        registry = self.corpus_registry(corpus)
        sizes = [
            len(mine(qa, corpus, k=k, registry=registry).mined_ids) for k in (1, 5, 20, 50)
        ]
        assert sizes == sorted(sizes)

    def test_mining_is_deterministic(self):
        corpus = random_set(200, 8, seed=16, prefix="c")
        qa = random_set(9, 8, seed=17, prefix="q")
        registry = self.corpus_registry(corpus)
        r1 = mine(qa, corpus, k=10, registry=registry)
        r2 = mine(qa, corpus, k=10, registry=registry)
        assert r1.mined_ids == r2.mined_ids
        assert r1.neighbors == r2.neighbors

    def test_qa_overlap_rejected(self):
        corpus = random_set(10, 4, seed=18, prefix="same")
        with pytest.raises(InvalidParameterError):
            mine(corpus, corpus, k=2)

    def test_dimension_mismatch(self):
        corpus = random_set(10, 4, seed=19, prefix="c")
        qa = random_set(2, 6, seed=20, prefix="q")
        with pytest.raises(DimensionMismatchError):
            mine(qa, corpus, k=2)

    def test_unknown_document_in_registry(self):
        corpus = random_set(10, 4, seed=21, prefix="c")
        qa = random_set(2, 4, seed=22, prefix="q")
        registry = DocumentRegistry([synthetic_inventory("other", 3, 5)])
        with pytest.raises(MissingDocumentError):
            mine(qa, corpus, k=2, registry=registry)


class TestEmitMinedBlend:
    def registry(self):
        return SourceRegistry(
            [
                DataSource("web", "english_web", 100),
                DataSource("qa_stem", "qa_category", 10, qa_category="stem"),
            ]
        )

    def result(self):
        corpus = random_set(20, 4, seed=23, prefix="c")
        qa = random_set(2, 4, seed=24, prefix="q")
        return mine(qa, corpus, k=3)

    def test_weight_preserving_substitution(self):
        qb = normalize({"web": 0.7, "qa_stem": 0.3}, label="QB")
        mined = emit_mined_blend(self.result(), qb, self.registry())
        assert mined.weights == pytest.approx({"mined_docs": 0.7, "qa_stem": 0.3})

    def test_qa_only_blend_is_noop(self):
        qb = normalize({"qa_stem": 1.0}, label="QB")
        mined = emit_mined_blend(self.result(), qb, self.registry())
        assert mined is qb

    def test_empty_result_rejected(self):
        qb = normalize({"web": 1.0}, label="QB")
        from cptkit.mining import MiningResult

        empty = MiningResult(neighbors={}, mined_ids=(), mined_tokens=0, k=5, metric="cosine")
        with pytest.raises(EmptyMiningResultError):
            emit_mined_blend(empty, qb, self.registry())

    def test_result_passes_blend_invariants(self):
        qb = normalize({"web": 5.0, "qa_stem": 1.0}, label="QB")
        mined = emit_mined_blend(self.result(), qb, self.registry())
        assert abs(sum(mined.weights.values()) - 1.0) <= 1e-9
        assert all(w >= 0 for w in mined.weights.values())


class TestInterchangeFormat:
    def test_roundtrip(self, tmp_path):
        emb = random_set(37, 9, seed=25)
        vec_path, ids_path = str(tmp_path / "v.emb"), str(tmp_path / "v.emb.ids")
        write_embedding_set(emb, vec_path, ids_path)
        loaded = load_embedding_set(vec_path, ids_path)
        assert loaded.ids == emb.ids
        assert np.array_equal(loaded.vectors, emb.vectors)

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.emb"
        path.write_bytes(b"garbage-bytes-here")
        (tmp_path / "bad.emb.ids").write_text("a\n")
        with pytest.raises(EmbeddingFormatError) as err:
            load_embedding_set(str(path), str(path) + ".ids")
        assert err.value.byte_offset == 0

    def test_truncated_payload_reports_offset(self, tmp_path):
        emb = random_set(8, 4, seed=26)
        vec_path, ids_path = str(tmp_path / "t.emb"), str(tmp_path / "t.emb.ids")
        write_embedding_set(emb, vec_path, ids_path)
        blob = open(vec_path, "rb").read()
        with open(vec_path, "wb") as fh:
            fh.write(blob[:-5])
        with pytest.raises(EmbeddingFormatError) as err:
            load_embedding_set(vec_path, ids_path)
        assert err.value.byte_offset == len(blob) - 5

    def test_id_count_mismatch(self, tmp_path):
        emb = random_set(4, 4, seed=27)
        vec_path, ids_path = str(tmp_path / "m.emb"), str(tmp_path / "m.emb.ids")
        write_embedding_set(emb, vec_path, ids_path)
        with open(ids_path, "a", encoding="utf-8") as fh:
            fh.write("extra-id\n")
        with pytest.raises(EmbeddingFormatError):
            load_embedding_set(vec_path, ids_path)
