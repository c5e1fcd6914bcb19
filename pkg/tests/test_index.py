import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sciqa.corpus import Paper, Passage
from sciqa.embedding import HashEmbeddingProvider, quantize_binary
from sciqa.index import (
    HybridIndex,
    HybridIndexError,
    IndexConfig,
    MetadataFilter,
    analyze,
    build_index,
    minmax_normalize,
)
from sciqa.tokenizer import DefaultTokenizer


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def bm25_oracle(query_terms, doc_tokens, i, k1=1.2, b=0.75):
    """Scalar Okapi evaluation straight from the formula."""
    n = len(doc_tokens)
    dl = len(doc_tokens[i])
    avgdl = sum(len(d) for d in doc_tokens) / n
    score = 0.0
    for t in query_terms:
        df = sum(1 for d in doc_tokens if t in d)
        tf = doc_tokens[i].count(t)
        if tf == 0:
            continue
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
    return score


def minmax_oracle(scores):
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [0.0] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


def dense_oracle(query, text, provider):
    """Brute-force plus/minus-one expansion score for one passage."""
    q = np.asarray(query, dtype=np.float64)
    vec = provider.embed_batch([text])[0]
    bits = [int(b) for b in quantize_binary(vec).unpack()]
    num = sum(float(qi) * (2 * b - 1) for qi, b in zip(q, bits))
    return num / (float(np.linalg.norm(q)) * math.sqrt(len(bits)))


def fusion_oracle(query_text, query_vec, passages, provider, w_dense=0.6, w_sparse=0.4, k=50):
    """Score every passage outside the index and sort by the fusion rule."""
    doc_tokens = [p.text.lower().split() for p in passages]
    raws = [
        bm25_oracle(query_text.lower().split(), doc_tokens, i) for i in range(len(passages))
    ]
    norms = minmax_oracle(raws)
    denses = [dense_oracle(query_vec, p.text, provider) for p in passages]
    rows = [
        (p.passage_id, w_dense * d + w_sparse * s)
        for p, d, s in zip(passages, denses, norms)
    ]
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows[:k]


def mk_passage(pid, text, paper=None, kind="body"):
    return Passage(
        passage_id=pid,
        paper_id=paper or f"paper-{pid}",
        kind=kind,
        field_key="body:0" if kind == "body" else kind,
        section_path="S",
        text=text,
        token_count=len(text.split()),
        char_span=(0, len(text)),
    )


WORDS = [
    "retrieval", "ranking", "sparse", "dense", "hybrid", "index", "query",
    "passage", "corpus", "citation", "neural", "graph", "token", "model",
    "score", "fusion", "binary", "vector", "search", "paper",
]


def synth_passages(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        words = rng.choice(WORDS, size=rng.integers(5, 15))
        out.append(mk_passage(f"p{i:05d}", " ".join(words)))
    return out


# ---------------------------------------------------------------------------
# minmax
# ---------------------------------------------------------------------------


def test_minmax_example():
    assert minmax_normalize([2, 4, 6]) == [0.0, 0.5, 1.0]


def test_minmax_constant():
    assert minmax_normalize([5, 5]) == [0.0, 0.0]


def test_minmax_empty_is_error():
    with pytest.raises(ValueError):
        minmax_normalize([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_minmax_matches_oracle(scores):
    got = minmax_normalize(scores)
    want = minmax_oracle(scores)
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert abs(g - w) <= 1e-12
        assert -1e-12 <= g <= 1 + 1e-12


# ---------------------------------------------------------------------------
# BM25
# ---------------------------------------------------------------------------

BM25_DOCS = ["the cat sat on the mat", "the dog sat", "a cat and a dog"]
# Frozen outputs of bm25_oracle on BM25_DOCS (duplicate query terms count
# once per occurrence slot).
BM25_EXPECTED = {
    0: 1.2624516087879645,
    1: 0.550422501169911,
    2: 0.9133193552535431,
}


@pytest.fixture
def bm25_index():
    passages = [mk_passage(f"d{i}", text) for i, text in enumerate(BM25_DOCS)]
    provider = HashEmbeddingProvider(dim=32, seed=1)
    return build_index(passages, provider, IndexConfig())


def test_bm25_zero_when_no_term_matches(bm25_index):
    assert bm25_index.bm25_score(["zebra"], "d0") == 0.0


def test_bm25_matches_hand_oracle(bm25_index):
    query = ["cat", "sat", "cat"]
    doc_tokens = [d.split() for d in BM25_DOCS]
    for i in range(3):
        got = bm25_index.bm25_score(query, f"d{i}")
        assert got == pytest.approx(BM25_EXPECTED[i], abs=1e-12)
        assert got == pytest.approx(bm25_oracle(query, doc_tokens, i), abs=1e-12)


def test_bm25_unknown_passage_is_error(bm25_index):
    with pytest.raises(HybridIndexError):
        bm25_index.bm25_score(["cat"], "nope")


def test_bm25_tf_monotone_and_bounded():
    # Increasing tf with everything else fixed raises the score toward
    # idf * (k1 + 1).
    k1, b = 1.2, 0.75
    n, df, dl, avgdl = 10, 3, 20, 20.0
    idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
    prev = 0.0
    for tf in range(1, 60):
        score = idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
        assert score > prev
        assert score < idf * (k1 + 1)
        prev = score


# ---------------------------------------------------------------------------
# Hybrid search
# ---------------------------------------------------------------------------


def test_build_empty_index():
    provider = HashEmbeddingProvider(dim=32, seed=1)
    idx = build_index([], provider, IndexConfig())
    assert len(idx) == 0
    assert idx.search_hybrid("anything", np.zeros(32), k=5) == []


def test_both_arms_report_size():
    passages = synth_passages(10)
    provider = HashEmbeddingProvider(dim=32, seed=1)
    idx = build_index(passages, provider, IndexConfig())
    assert idx.sparse_size == 10
    assert idx.dense_size == 10


def test_rebuild_is_deterministic():
    passages = synth_passages(25)
    provider = HashEmbeddingProvider(dim=32, seed=1)
    a = build_index(passages, provider, IndexConfig())
    b = build_index(passages, provider, IndexConfig())
    assert np.array_equal(a.codes, b.codes)
    assert a._bm25.postings == b._bm25.postings
    assert a._bm25.doc_len == b._bm25.doc_len


def test_duplicate_passage_ids_rejected():
    passages = [mk_passage("same", "a b c"), mk_passage("same", "d e f")]
    provider = HashEmbeddingProvider(dim=32, seed=1)
    with pytest.raises(HybridIndexError):
        build_index(passages, provider, IndexConfig())


def test_search_matches_bruteforce_oracle():
    passages = synth_passages(200, seed=3)
    provider = HashEmbeddingProvider(dim=64, seed=2)
    idx = build_index(passages, provider, IndexConfig())
    query = "hybrid retrieval ranking fusion"
    qv = idx.embed_query(query)
    got = idx.search_hybrid(query, qv, k=50)
    want = fusion_oracle(query, qv, passages, provider, k=50)
    assert [(s.passage_id) for s in got] == [pid for pid, _ in want]
    for s, (_, fused) in zip(got, want):
        assert s.fused_score == pytest.approx(fused, abs=1e-9)
        assert s.fused_score == pytest.approx(
            0.6 * s.dense_score + 0.4 * s.sparse_score_norm, abs=1e-12
        )


def test_fused_weighting_example():
    # Default weights are (0.6, 0.4): dense 0.8 with normalized sparse 0.5
    # fuses to 0.68.
    cfg = IndexConfig()
    assert (cfg.w_dense, cfg.w_sparse) == (0.6, 0.4)
    assert cfg.w_dense * 0.8 + cfg.w_sparse * 0.5 == pytest.approx(0.68, abs=1e-12)


def test_filter_soundness():
    papers = [
        Paper(paper_id="old", abstract="x.", year=2010, venue="A",
              fields_of_study=frozenset({"Biology"})),
        Paper(paper_id="new", abstract="x.", year=2022, venue="B",
              fields_of_study=frozenset({"Computer Science"})),
    ]
    passages = [
        mk_passage("p-old", "shared retrieval words", paper="old"),
        mk_passage("p-new", "shared retrieval words", paper="new"),
    ]
    provider = HashEmbeddingProvider(dim=32, seed=1)
    idx = build_index(passages, provider, IndexConfig(), papers=papers)
    qv = idx.embed_query("shared retrieval words")
    flt = MetadataFilter(year_range=(2018, 2024))
    hits = idx.search_hybrid("shared retrieval words", qv, flt, k=10)
    assert [h.paper_id for h in hits] == ["new"]
    flt = MetadataFilter(venues=frozenset({"A"}))
    hits = idx.search_hybrid("shared retrieval words", qv, flt, k=10)
    assert [h.paper_id for h in hits] == ["old"]
    flt = MetadataFilter(fields_of_study=frozenset({"Computer Science"}))
    hits = idx.search_hybrid("shared retrieval words", qv, flt, k=10)
    assert [h.paper_id for h in hits] == ["new"]
    assert idx.search_hybrid("shared", qv, MetadataFilter(year_range=(2030, None)), k=10) == []


def test_unknown_paper_excluded_when_filter_active():
    passages = [mk_passage("p0", "retrieval text", paper="ghost")]
    provider = HashEmbeddingProvider(dim=32, seed=1)
    idx = build_index(passages, provider, IndexConfig(), papers=[])
    qv = idx.embed_query("retrieval")
    assert idx.search_hybrid("retrieval", qv, MetadataFilter(year_range=(2000, None)), k=5) == []
    assert len(idx.search_hybrid("retrieval", qv, None, k=5)) == 1


def test_single_arm_monotonicity():
    passages = synth_passages(80, seed=4)
    provider = HashEmbeddingProvider(dim=64, seed=2)
    idx = build_index(passages, provider, IndexConfig())
    query = "sparse index search"
    qv = idx.embed_query(query)

    dense_only = idx.search_hybrid(query, qv, k=80, config=IndexConfig.with_dense_weight(1.0))
    by_dense = sorted(dense_only, key=lambda s: (-s.dense_score, s.passage_id))
    assert [s.passage_id for s in dense_only] == [s.passage_id for s in by_dense]

    sparse_only = idx.search_hybrid(query, qv, k=80, config=IndexConfig.with_dense_weight(0.0))
    by_sparse = sorted(sparse_only, key=lambda s: (-s.sparse_score_raw, s.passage_id))
    assert [s.passage_id for s in sparse_only] == [s.passage_id for s in by_sparse]


def test_tie_break_ascending_passage_id():
    # Identical texts produce identical scores in both arms.
    passages = [mk_passage(pid, "identical words here") for pid in ("pz", "pa", "pm")]
    provider = HashEmbeddingProvider(dim=32, seed=1)
    idx = build_index(passages, provider, IndexConfig())
    qv = idx.embed_query("identical words")
    hits = idx.search_hybrid("identical words", qv, k=3)
    assert [h.passage_id for h in hits] == ["pa", "pm", "pz"]


def test_search_deterministic():
    passages = synth_passages(60, seed=5)
    provider = HashEmbeddingProvider(dim=32, seed=2)
    idx = build_index(passages, provider, IndexConfig())
    qv = idx.embed_query("ranking corpus")
    a = idx.search_hybrid("ranking corpus", qv, k=20)
    b = idx.search_hybrid("ranking corpus", qv, k=20)
    assert a == b


def test_pooled_mode_matches_exhaustive_when_pool_large():
    passages = synth_passages(50, seed=6)
    provider = HashEmbeddingProvider(dim=32, seed=2)
    idx = build_index(passages, provider, IndexConfig())
    qv = idx.embed_query("vector search")
    exhaustive = idx.search_hybrid("vector search", qv, k=10)
    pooled = idx.search_hybrid(
        "vector search", qv, k=10,
        config=IndexConfig(exhaustive=False, candidate_pool_per_arm=50),
    )
    assert [s.passage_id for s in exhaustive] == [s.passage_id for s in pooled]


def test_search_sparse_kind_restriction():
    passages = [
        mk_passage("a1", "quantized ranking evidence", kind="abstract"),
        mk_passage("b1", "quantized ranking evidence", kind="body"),
        mk_passage("t1", "quantized ranking evidence", kind="title"),
    ]
    provider = HashEmbeddingProvider(dim=32, seed=1)
    idx = build_index(passages, provider, IndexConfig())
    hits = idx.search_sparse("quantized", k=10, kinds=frozenset({"abstract", "title"}))
    assert {h.passage_id for h in hits} == {"a1", "t1"}


def test_persistence_roundtrip(tmp_path):
    papers = [Paper(paper_id=f"paper-p{i:05d}", abstract="x.", year=2020) for i in range(30)]
    passages = synth_passages(30, seed=7)
    provider = HashEmbeddingProvider(dim=64, seed=2)
    idx = build_index(passages, provider, IndexConfig(), papers=papers)
    idx.save(tmp_path / "idx")
    loaded = HybridIndex.load(tmp_path / "idx", provider=provider)
    qv = idx.embed_query("fusion ranking")
    a = idx.search_hybrid("fusion ranking", qv, k=10, flt=MetadataFilter(year_range=(2019, 2021)))
    b = loaded.search_hybrid("fusion ranking", qv, k=10, flt=MetadataFilter(year_range=(2019, 2021)))
    assert a == b
    assert loaded.bm25_score(["fusion"], passages[0].passage_id) == idx.bm25_score(
        ["fusion"], passages[0].passage_id
    )


def test_load_rejects_wrong_magic(tmp_path):
    d = tmp_path / "notanindex"
    d.mkdir()
    (d / "meta.json").write_text('{"magic": "other", "version": 1}')
    with pytest.raises(HybridIndexError):
        HybridIndex.load(d)


def test_load_rejects_provider_mismatch(tmp_path):
    passages = synth_passages(5, seed=8)
    provider = HashEmbeddingProvider(dim=32, seed=2)
    build_index(passages, provider, IndexConfig()).save(tmp_path / "idx")
    other = HashEmbeddingProvider(dim=32, seed=99)
    with pytest.raises(HybridIndexError):
        HybridIndex.load(tmp_path / "idx", provider=other)


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        IndexConfig(w_dense=0.7, w_sparse=0.7)
    with pytest.raises(ValueError):
        IndexConfig(w_dense=-0.2, w_sparse=1.2)


def test_analyze_lowercases():
    assert analyze("The CAT, sat!", DefaultTokenizer()) == ["the", "cat", ",", "sat", "!"]


def test_symmetric_query_mode_matches_scalar_fallback():
    from sciqa.embedding import quantize_binary, symmetric_score

    passages = synth_passages(25, seed=9)
    provider = HashEmbeddingProvider(dim=32, seed=2)
    idx = build_index(passages, provider, IndexConfig(symmetric_queries=True))
    qv = idx.embed_query("binary fusion")
    hits = idx.search_hybrid("binary fusion", qv, k=25)
    qcode = quantize_binary(qv)
    allowed = {1.0 - 2.0 * k / 32 for k in range(33)}
    for h in hits:
        want = symmetric_score(
            qcode, quantize_binary(provider.embed_batch([h.text])[0])
        )
        assert h.dense_score == pytest.approx(want, abs=1e-12)
        assert any(abs(h.dense_score - a) < 1e-12 for a in allowed)
