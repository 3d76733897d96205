import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birb_engine.embed import EmbeddingMatrix
from birb_engine.errors import DimensionMismatch, EmptyPool, ZeroVector
from birb_engine.evaluation import EvalSettings, evaluate_corpus
from birb_engine.corpus import Window
from birb_engine.retrieval import (Query, build_centroid_query, cosine_score, cosine_scores,
                                   rank_candidates, sample_exemplar_sets)


def test_sample_sizes_and_distinctness():
    pool = [f"w{i:03d}" for i in range(100)]
    sets = [s for s in sample_exemplar_sets(pool, [16], 5, seed=1, species="x")]
    assert len(sets) == 5
    for s in sets:
        assert len(set(s.window_ids)) == 16 and s.effective_k == 16


def test_small_pool_caps_k():
    sets = sample_exemplar_sets(["a", "b", "c"], [8], 5, seed=0, species="x")
    assert all(s.effective_k == 3 and s.k == 8 for s in sets)


def test_sampling_is_seed_deterministic_and_order_free():
    pool = [f"w{i}" for i in range(40)]
    a = sample_exemplar_sets(pool, [1, 4], 5, seed=7, species="x")
    b = sample_exemplar_sets(list(reversed(pool)), [1, 4], 5, seed=7, species="x")
    assert a == b
    # each (k, sample) draws from its own stream
    only4 = sample_exemplar_sets(pool, [4], 5, seed=7, species="x")
    assert [s for s in a if s.k == 4] == only4
    assert sample_exemplar_sets(pool, [4], 5, seed=8, species="x") != only4


def test_empty_pool():
    with pytest.raises(EmptyPool):
        sample_exemplar_sets([], [1], 1)


def test_centroid_examples():
    v = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(build_centroid_query(v[None]).vector, v)
    q = build_centroid_query(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(q.vector, [0.5, 0.5])
    assert np.array_equal(build_centroid_query(np.tile(v, (8, 1))).vector, v)


def test_centroid_normalize_first():
    q = build_centroid_query(np.array([[2.0, 0.0], [0.0, 4.0]]), normalize_first=True)
    assert np.allclose(q.vector, [0.5, 0.5])
    with pytest.raises(ZeroVector):
        build_centroid_query(np.zeros((1, 2)), normalize_first=True)


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_score(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_score([1, 0], [0, 1]) == 0.0
    assert abs(cosine_score([1, 1], [1, 0]) - 0.70710678) < 1e-8
    with pytest.raises(ZeroVector):
        cosine_score([0, 0], [1, 0])
    with pytest.raises(DimensionMismatch):
        cosine_score([1, 0], [1, 0, 0])


def test_zero_candidates_score_zero():
    assert np.array_equal(cosine_scores(np.array([1.0, 0.0]), np.array([[0.0, 0.0], [2.0, 0.0]])),
                          [0.0, 1.0])


def _corpus(vectors, ids=None):
    vectors = np.asarray(vectors, dtype=np.float32)
    ids = ids or [f"c{i}" for i in range(len(vectors))]
    return EmbeddingMatrix(ids, vectors, "t")


def test_rank_antipodal_and_ties():
    v = np.array([1.0, 2.0])
    r = rank_candidates(Query("x", v), _corpus([-v, v], ["neg", "pos"]))
    assert r.ids == ["pos", "neg"]
    assert r.scores == pytest.approx([1.0, -1.0])
    same = rank_candidates(Query("x", v), _corpus([v] * 4, ["d", "b", "a", "c"]))
    assert same.ids == ["a", "b", "c", "d"]


def test_rank_matches_exhaustive_sort():
    rng = np.random.default_rng(3)
    vecs = rng.normal(size=(5, 3))
    q = rng.normal(size=3)
    expected = sorted(range(5), key=lambda i: -np.dot(q, vecs[i]) / np.linalg.norm(vecs[i]))
    got = rank_candidates(Query("x", q), _corpus(vecs.astype(np.float32)))
    assert got.ids == [f"c{i}" for i in expected]


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_rank_order_invariant_to_query_scale(seed, c):
    rng = np.random.default_rng(seed)
    corpus = _corpus(rng.normal(size=(30, 6)))
    q = rng.normal(size=6)
    assert rank_candidates(Query("x", q), corpus).ids == rank_candidates(Query("x", c * q), corpus).ids


def test_partitioned_scoring_matches():
    rng = np.random.default_rng(5)
    corpus = _corpus(rng.normal(size=(40, 8)))
    q = Query("x", rng.normal(size=8))
    whole = rank_candidates(q, corpus)
    parts = [rank_candidates(q, corpus.subset(corpus.ids[i::3])) for i in range(3)]
    merged = sorted(((s, i) for p in parts for i, s in zip(p.ids, p.scores)),
                    key=lambda t: (-t[0], t[1]))
    assert [i for _, i in merged] == whole.ids
    assert np.array_equal([s for s, _ in merged], whole.scores)


def test_exemplars_are_excluded():
    rng = np.random.default_rng(1)
    corpus = _corpus(rng.normal(size=(10, 4)))
    q = build_centroid_query(corpus.rows(["c1", "c2"]), "x", exemplar_ids=["c1", "c2"])
    r = rank_candidates(q, corpus)
    assert "c1" not in r.ids and "c2" not in r.ids and len(r) == 8


def _toy_eval():
    rng = np.random.default_rng(0)
    windows, vecs = [], []
    for i in range(20):
        sp = "aaa" if i % 2 else "bbb"
        windows.append(Window(f"r{i}", 0.0, 5.0, frozenset({sp})))
        base = np.array([1.0, 0.0]) if sp == "aaa" else np.array([0.0, 1.0])
        vecs.append(base + rng.normal(0, 0.3, 2))
    corpus = EmbeddingMatrix([w.id for w in windows], np.array(vecs, dtype=np.float32), "toy")
    pools = {"aaa": [w.id for w in windows if "aaa" in w.labels],
             "bbb": [w.id for w in windows if "bbb" in w.labels]}
    return corpus, windows, pools


def test_learned_representation_independent_of_k():
    corpus, windows, pools = _toy_eval()
    learned = {"aaa": [1.0, 0.0], "bbb": [0.0, 1.0]}
    for ks in ((1,), (1, 4, 16)):
        recs, _ = evaluate_corpus(corpus, pools, corpus, windows, "toy",
                                  EvalSettings(ks, 3, 0), learned=learned)
        lr = sorted((r.species, r.roc_auc) for r in recs if r.k == 0)
        assert len(lr) == 2
        if ks == (1,):
            first = lr
        assert lr == first


def test_evaluate_skips_species_without_positives():
    corpus, windows, pools = _toy_eval()
    pools["ccc"] = ["r0"]
    recs, skipped = evaluate_corpus(corpus, pools, corpus, windows, "toy", EvalSettings((1,), 2, 0))
    assert [s["species"] for s in skipped] == ["ccc"]
    assert skipped[0]["reason"] == "no_positives"
    assert {r.species for r in recs} == {"aaa", "bbb"}
    assert all(r.roc_auc > 0.9 for r in recs)


def test_evaluate_dimension_guard():
    corpus, windows, pools = _toy_eval()
    with pytest.raises(DimensionMismatch):
        evaluate_corpus(corpus, pools, corpus, windows, "toy", learned={"aaa": [1.0, 0.0, 0.0]})
