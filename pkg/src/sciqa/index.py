"""Hybrid passage retrieval: sparse BM25 + dense binary codes, fused.

Both arms index every passage. A search takes the top candidates from each
arm after paper-level metadata filtering, unions them, min-max normalizes
the raw BM25 scores over the union (candidates the keyword arm never
matched enter as raw 0), and ranks by

    fused = w_dense * dense_score + w_sparse * normalized_bm25

with ties broken by ascending passage_id. In exhaustive mode (the default
at local scale) each arm contributes all filtered passages, so the result
is exact; the candidate-pool interface is the seam where an approximate
nearest-neighbor backend would slot in at larger scale.

The index persists to a directory with a versioned magic header:
meta.json, passages.jsonl, papers.json, codes.npy, bm25.json.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Paper, Passage
from .embedding import EmbeddingProvider, asymmetric_scores, embed, pack_codes, unpack_codes
from .tokenizer import DefaultTokenizer, Tokenizer

INDEX_MAGIC = "sciqa-hybrid-index"
INDEX_VERSION = 1


class HybridIndexError(Exception):
    """Index build/load/search failure."""


@dataclass(frozen=True)
class IndexConfig:
    w_dense: float = 0.6
    w_sparse: float = 0.4
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    candidate_pool_per_arm: int = 512
    exhaustive: bool = True
    # Binarize queries too (symmetric Hamming scoring) instead of the
    # default full-precision-query asymmetric scoring.
    symmetric_queries: bool = False

    def __post_init__(self):
        if self.w_dense < 0 or self.w_sparse < 0:
            raise ValueError("fusion weights must be non-negative")
        if abs(self.w_dense + self.w_sparse - 1.0) > 1e-9:
            raise ValueError("fusion weights must sum to 1")

    @classmethod
    def with_dense_weight(cls, w_dense: float, **kwargs) -> "IndexConfig":
        return cls(w_dense=w_dense, w_sparse=1.0 - w_dense, **kwargs)


@dataclass(frozen=True)
class MetadataFilter:
    year_range: tuple[int | None, int | None] | None = None
    venues: frozenset[str] | None = None
    fields_of_study: frozenset[str] | None = None

    def __post_init__(self):
        if self.year_range is not None:
            lo, hi = self.year_range
            if lo is not None and hi is not None and lo > hi:
                raise ValueError(f"year_range min {lo} > max {hi}")

    @property
    def is_empty(self) -> bool:
        return self.year_range is None and self.venues is None and self.fields_of_study is None

    def matches(self, year: int | None, venue: str | None, fos: frozenset[str]) -> bool:
        """Every active clause must hold; unknown metadata fails the clause."""
        if self.year_range is not None:
            lo, hi = self.year_range
            if year is None:
                return False
            if lo is not None and year < lo:
                return False
            if hi is not None and year > hi:
                return False
        if self.venues is not None:
            if venue is None or venue not in self.venues:
                return False
        if self.fields_of_study is not None:
            if not (fos & self.fields_of_study):
                return False
        return True


@dataclass(frozen=True)
class ScoredPassage:
    passage_id: str
    paper_id: str
    kind: str
    field_key: str
    section_path: str
    text: str
    char_span: tuple[int, int]
    dense_score: float
    sparse_score_raw: float
    sparse_score_norm: float
    fused_score: float
    provenance: str  # "dense" | "sparse" | "both"

    @classmethod
    def from_passage(
        cls,
        p: Passage,
        dense_score: float,
        sparse_score_raw: float,
        sparse_score_norm: float,
        fused_score: float,
        provenance: str,
    ) -> "ScoredPassage":
        return cls(
            passage_id=p.passage_id,
            paper_id=p.paper_id,
            kind=p.kind,
            field_key=p.field_key,
            section_path=p.section_path,
            text=p.text,
            char_span=p.char_span,
            dense_score=dense_score,
            sparse_score_raw=sparse_score_raw,
            sparse_score_norm=sparse_score_norm,
            fused_score=fused_score,
            provenance=provenance,
        )


def minmax_normalize(scores: Sequence[float]) -> list[float]:
    """Rescale to [0, 1]; a constant list maps to all zeros."""
    if len(scores) == 0:
        raise ValueError("cannot normalize an empty score list")
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [0.0] * len(scores)
    span = hi - lo
    return [(s - lo) / span for s in scores]


def analyze(text: str, tokenizer: Tokenizer) -> list[str]:
    """Lowercased token stream used by the sparse arm."""
    lowered = text.lower()
    return [lowered[s.start : s.end] for s in tokenizer.tokenize(lowered)]


@dataclass
class _PaperMeta:
    year: int | None = None
    venue: str | None = None
    fields_of_study: frozenset[str] = frozenset()


@dataclass
class _Bm25Stats:
    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    doc_len: list[int] = field(default_factory=list)
    avgdl: float = 0.0


class HybridIndex:
    """Immutable two-arm index over a fixed passage set."""

    def __init__(
        self,
        passages: list[Passage],
        codes: np.ndarray,
        dim: int,
        bm25: _Bm25Stats,
        config: IndexConfig,
        papers: dict[str, _PaperMeta],
        provider: EmbeddingProvider | None = None,
        tokenizer: Tokenizer | None = None,
    ):
        self.passages = passages
        self.codes = codes  # packed uint8, shape (n, ceil(dim/8))
        self.dim = dim
        self.config = config
        self.provider = provider
        self.tokenizer = tokenizer or DefaultTokenizer()
        self._bm25 = bm25
        self._papers = papers
        self._by_id = {p.passage_id: i for i, p in enumerate(passages)}
        self._bits = unpack_codes(codes, dim) if len(passages) else np.zeros((0, dim), np.float32)

    def __len__(self) -> int:
        return len(self.passages)

    @property
    def sparse_size(self) -> int:
        return len(self._bm25.doc_len)

    @property
    def dense_size(self) -> int:
        return self.codes.shape[0]

    def get_passage(self, passage_id: str) -> Passage:
        return self.passages[self._by_id[passage_id]]

    # -- sparse arm --------------------------------------------------------

    def _idf(self, term: str) -> float:
        n = len(self.passages)
        df = len(self._bm25.postings.get(term, ()))
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def bm25_score(self, query_terms: Sequence[str], passage_id: str) -> float:
        """Okapi BM25 of analyzed query terms against one passage.

        Each occurrence slot in ``query_terms`` contributes its own summand.
        """
        if passage_id not in self._by_id:
            raise HybridIndexError(f"unknown passage id {passage_id!r}")
        doc = self._by_id[passage_id]
        k1, b = self.config.bm25_k1, self.config.bm25_b
        avgdl = self._bm25.avgdl or 1.0
        dl = self._bm25.doc_len[doc]
        score = 0.0
        for term in query_terms:
            tf = 0
            for d, f in self._bm25.postings.get(term, ()):
                if d == doc:
                    tf = f
                    break
            if tf == 0:
                continue
            score += self._idf(term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
        return score

    def _bm25_matches(self, query_terms: Sequence[str], allowed: np.ndarray) -> dict[int, float]:
        """Raw BM25 for every allowed passage matching at least one term."""
        k1, b = self.config.bm25_k1, self.config.bm25_b
        avgdl = self._bm25.avgdl or 1.0
        scores: dict[int, float] = {}
        for term in query_terms:
            plist = self._bm25.postings.get(term)
            if not plist:
                continue
            idf = self._idf(term)
            for doc, tf in plist:
                if not allowed[doc]:
                    continue
                dl = self._bm25.doc_len[doc]
                part = idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))
                scores[doc] = scores.get(doc, 0.0) + part
        return scores

    # -- filtering ---------------------------------------------------------

    def _allowed_mask(self, flt: MetadataFilter | None, kinds: frozenset[str] | None) -> np.ndarray:
        mask = np.ones(len(self.passages), dtype=bool)
        for i, p in enumerate(self.passages):
            if kinds is not None and p.kind not in kinds:
                mask[i] = False
                continue
            if flt is not None and not flt.is_empty:
                meta = self._papers.get(p.paper_id)
                if meta is None or not flt.matches(meta.year, meta.venue, meta.fields_of_study):
                    mask[i] = False
        return mask

    # -- search ------------------------------------------------------------

    def search_hybrid(
        self,
        query_text: str,
        query_embedding: np.ndarray,
        flt: MetadataFilter | None = None,
        k: int = 50,
        config: IndexConfig | None = None,
        kinds: frozenset[str] | None = None,
    ) -> list[ScoredPassage]:
        """Fused dense + sparse ranking, descending, ties by passage_id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        cfg = config or self.config
        if not self.passages:
            return []
        allowed = self._allowed_mask(flt, kinds)
        allowed_idx = np.flatnonzero(allowed)
        if allowed_idx.size == 0:
            return []

        if cfg.symmetric_queries:
            dense_all = self._symmetric_scores(query_embedding)
        else:
            dense_all = asymmetric_scores(query_embedding, self._bits)
        query_terms = analyze(query_text, self.tokenizer)
        sparse_raw = self._bm25_matches(query_terms, allowed)

        pool = cfg.candidate_pool_per_arm
        if cfg.exhaustive:
            dense_arm = set(allowed_idx.tolist())
            sparse_arm = set(sparse_raw)
        else:
            by_dense = sorted(
                allowed_idx.tolist(),
                key=lambda i: (-dense_all[i], self.passages[i].passage_id),
            )
            dense_arm = set(by_dense[:pool])
            by_sparse = sorted(
                sparse_raw, key=lambda i: (-sparse_raw[i], self.passages[i].passage_id)
            )
            sparse_arm = set(by_sparse[:pool])

        union = sorted(dense_arm | sparse_arm, key=lambda i: self.passages[i].passage_id)
        raws = [sparse_raw.get(i, 0.0) for i in union]
        norms = minmax_normalize(raws)
        scored = []
        for i, raw, norm in zip(union, raws, norms):
            dense = float(dense_all[i])
            fused = cfg.w_dense * dense + cfg.w_sparse * norm
            in_d, in_s = i in dense_arm, i in sparse_arm
            provenance = "both" if (in_d and in_s) else ("dense" if in_d else "sparse")
            scored.append(
                ScoredPassage.from_passage(self.passages[i], dense, raw, norm, fused, provenance)
            )
        scored.sort(key=lambda s: (-s.fused_score, s.passage_id))
        return scored[:k]

    def search_sparse(
        self,
        query_text: str,
        flt: MetadataFilter | None = None,
        k: int = 20,
        kinds: frozenset[str] | None = None,
    ) -> list[ScoredPassage]:
        """Keyword-only ranking by raw BM25 (used for the abstract arm)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.passages:
            return []
        allowed = self._allowed_mask(flt, kinds)
        query_terms = analyze(query_text, self.tokenizer)
        sparse_raw = self._bm25_matches(query_terms, allowed)
        if not sparse_raw:
            return []
        union = sorted(sparse_raw, key=lambda i: self.passages[i].passage_id)
        raws = [sparse_raw[i] for i in union]
        norms = minmax_normalize(raws)
        scored = []
        for i, raw, norm in zip(union, raws, norms):
            scored.append(
                ScoredPassage.from_passage(self.passages[i], 0.0, raw, norm, norm, "sparse")
            )
        scored.sort(key=lambda s: (-s.fused_score, s.passage_id))
        return scored[:k]

    def _symmetric_scores(self, query_embedding: np.ndarray) -> np.ndarray:
        """Binary-query fallback: 1 - 2 * hamming / d against every code."""
        q = np.asarray(query_embedding, dtype=np.float64).ravel()
        if q.shape[0] != self.dim:
            raise HybridIndexError(f"dimension mismatch: query {q.shape[0]} vs index {self.dim}")
        qbits = (q > 0).astype(np.float64)
        b = self._bits.astype(np.float64)
        hamming = b @ (1.0 - qbits) + (1.0 - b) @ qbits
        return 1.0 - 2.0 * hamming / self.dim

    def embed_query(self, text: str) -> np.ndarray:
        if self.provider is None:
            raise HybridIndexError("index has no embedding provider attached")
        return embed([text], self.provider)[0]

    # -- persistence -------------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "magic": INDEX_MAGIC,
            "version": INDEX_VERSION,
            "dim": self.dim,
            "n_passages": len(self.passages),
            "provider_id": self.provider.provider_id if self.provider else None,
            "config": asdict(self.config),
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        with (out / "passages.jsonl").open("w", encoding="utf-8") as fh:
            for p in self.passages:
                fh.write(json.dumps(_passage_to_record(p), sort_keys=True) + "\n")
        papers = {
            pid: {
                "year": m.year,
                "venue": m.venue,
                "fields_of_study": sorted(m.fields_of_study),
            }
            for pid, m in self._papers.items()
        }
        (out / "papers.json").write_text(json.dumps(papers, sort_keys=True))
        np.save(out / "codes.npy", self.codes)
        bm25 = {
            "avgdl": self._bm25.avgdl,
            "doc_len": self._bm25.doc_len,
            "postings": {t: [[d, f] for d, f in pl] for t, pl in self._bm25.postings.items()},
        }
        (out / "bm25.json").write_text(json.dumps(bm25, sort_keys=True))

    @classmethod
    def load(cls, in_dir: str | Path, provider: EmbeddingProvider | None = None) -> "HybridIndex":
        src = Path(in_dir)
        meta = json.loads((src / "meta.json").read_text())
        if meta.get("magic") != INDEX_MAGIC:
            raise HybridIndexError(f"{src} is not a hybrid index (bad magic)")
        if meta.get("version") != INDEX_VERSION:
            raise HybridIndexError(f"unsupported index version {meta.get('version')}")
        if provider is not None and meta.get("provider_id") not in (None, provider.provider_id):
            raise HybridIndexError(
                f"index was built with provider {meta['provider_id']!r}, "
                f"got {provider.provider_id!r}"
            )
        passages = []
        with (src / "passages.jsonl").open(encoding="utf-8") as fh:
            for line in fh:
                passages.append(_passage_from_record(json.loads(line)))
        papers_raw = json.loads((src / "papers.json").read_text())
        papers = {
            pid: _PaperMeta(
                year=rec.get("year"),
                venue=rec.get("venue"),
                fields_of_study=frozenset(rec.get("fields_of_study") or ()),
            )
            for pid, rec in papers_raw.items()
        }
        codes = np.load(src / "codes.npy")
        bm_raw = json.loads((src / "bm25.json").read_text())
        bm25 = _Bm25Stats(
            postings={t: [(int(d), int(f)) for d, f in pl] for t, pl in bm_raw["postings"].items()},
            doc_len=[int(x) for x in bm_raw["doc_len"]],
            avgdl=float(bm_raw["avgdl"]),
        )
        config = IndexConfig(**meta["config"])
        return cls(passages, codes, meta["dim"], bm25, config, papers, provider=provider)


def _passage_to_record(p: Passage) -> dict:
    return {
        "passage_id": p.passage_id,
        "paper_id": p.paper_id,
        "kind": p.kind,
        "field_key": p.field_key,
        "section_path": p.section_path,
        "text": p.text,
        "token_count": p.token_count,
        "char_span": list(p.char_span),
        "overlap_prefix_tokens": p.overlap_prefix_tokens,
        "degenerate": p.degenerate,
    }


def _passage_from_record(rec: dict) -> Passage:
    return Passage(
        passage_id=rec["passage_id"],
        paper_id=rec["paper_id"],
        kind=rec["kind"],
        field_key=rec["field_key"],
        section_path=rec["section_path"],
        text=rec["text"],
        token_count=rec["token_count"],
        char_span=tuple(rec["char_span"]),
        overlap_prefix_tokens=rec["overlap_prefix_tokens"],
        degenerate=rec.get("degenerate", False),
    )


def build_index(
    passages: Sequence[Passage],
    provider: EmbeddingProvider,
    config: IndexConfig | None = None,
    papers: Iterable[Paper] | None = None,
    tokenizer: Tokenizer | None = None,
    embed_batch_size: int = 64,
) -> HybridIndex:
    """Embed, quantize, and index a passage set for both arms.

    ``papers`` supplies the metadata the paper-level filters check; a
    passage whose paper is unknown is excluded whenever a filter is active.
    """
    config = config or IndexConfig()
    tokenizer = tokenizer or DefaultTokenizer()
    passages = list(passages)
    seen: set[str] = set()
    for p in passages:
        if p.passage_id in seen:
            raise HybridIndexError(f"duplicate passage id {p.passage_id!r}")
        seen.add(p.passage_id)

    bm25 = _Bm25Stats()
    for p in passages:
        terms = analyze(p.text, tokenizer)
        bm25.doc_len.append(len(terms))
        tfs: dict[str, int] = {}
        for t in terms:
            tfs[t] = tfs.get(t, 0) + 1
        doc = len(bm25.doc_len) - 1
        for t, f in tfs.items():
            bm25.postings.setdefault(t, []).append((doc, f))
    bm25.avgdl = (sum(bm25.doc_len) / len(bm25.doc_len)) if bm25.doc_len else 0.0

    dim = provider.dim
    if passages:
        rows = []
        for start in range(0, len(passages), embed_batch_size):
            batch = passages[start : start + embed_batch_size]
            try:
                rows.append(embed([p.text for p in batch], provider))
            except Exception as exc:
                raise HybridIndexError(
                    f"embedding failed for batch [{start}, {start + len(batch)}): {exc}"
                ) from exc
        vectors = np.vstack(rows)
        codes = pack_codes(vectors)
    else:
        codes = np.zeros((0, (dim + 7) // 8), dtype=np.uint8)

    paper_meta: dict[str, _PaperMeta] = {}
    for paper in papers or ():
        paper_meta[paper.paper_id] = _PaperMeta(
            year=paper.year,
            venue=paper.venue,
            fields_of_study=paper.fields_of_study,
        )
    return HybridIndex(passages, codes, dim, bm25, config, paper_meta, provider, tokenizer)


__all__ = [
    "HybridIndex",
    "IndexConfig",
    "HybridIndexError",
    "MetadataFilter",
    "ScoredPassage",
    "analyze",
    "build_index",
    "minmax_normalize",
]
