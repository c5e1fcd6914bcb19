"""Cross-encoder style reranking of retrieval candidates.

Snippet and abstract candidates are scored in one pool (a single relevance
scale keeps quote-extraction grouping simple) and the top 50 survive.
Scorers are pluggable; the bundled ``TokenOverlapScorer`` is an offline
mock that ranks by the fraction of query tokens present in the passage,
which is order-sensitive enough to exercise the stage deterministically.

A scorer failure never kills the query: the stage falls back to the
retrieval fusion order with a warning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

from .index import ScoredPassage
from .retrieval import CandidateSet
from .tokenizer import DefaultTokenizer

DEFAULT_RERANK_K = 50
SCORE_BATCH_SIZE = 32

WarnFn = Callable[[str], None]


class RerankScorer(Protocol):
    scorer_id: str

    def score(self, query: str, texts: Sequence[str]) -> list[float]: ...


class TokenOverlapScorer:
    """Fraction of distinct query tokens that occur in the passage."""

    scorer_id = "token-overlap"

    def __init__(self):
        self._tokenizer = DefaultTokenizer()

    def _tokens(self, text: str) -> set[str]:
        lowered = text.lower()
        return {lowered[s.start : s.end] for s in self._tokenizer.tokenize(lowered)}

    def score(self, query: str, texts: Sequence[str]) -> list[float]:
        q = self._tokens(query)
        if not q:
            return [0.0] * len(texts)
        return [len(q & self._tokens(t)) / len(q) for t in texts]


@dataclass(frozen=True)
class RerankedSet:
    """Candidates ordered by rerank score, truncated to ``retained_k``."""

    entries: tuple[tuple[ScoredPassage, float], ...]
    retained_k: int
    fallback: bool = False

    def __len__(self) -> int:
        return len(self.entries)

    def passages(self) -> list[ScoredPassage]:
        return [p for p, _ in self.entries]


def rerank_top_k(
    query: str,
    candidates: CandidateSet,
    scorer: RerankScorer,
    k: int = DEFAULT_RERANK_K,
    batch_size: int = SCORE_BATCH_SIZE,
    warn: WarnFn | None = None,
) -> RerankedSet:
    """Score every candidate exactly once and keep the top min(k, n).

    Ordering is descending score with ties broken by ascending passage_id,
    so the result is independent of candidate arrival order.
    """
    pool = candidates.all_candidates()
    if not pool:
        return RerankedSet(entries=(), retained_k=k)
    # Stable input order for batching; the final sort is order-insensitive.
    pool = sorted(pool, key=lambda p: p.passage_id)
    texts = [p.text for p in pool]
    scores: list[float] = []
    try:
        for start in range(0, len(texts), batch_size):
            batch_scores = list(scorer.score(query, texts[start : start + batch_size]))
            if len(batch_scores) != len(texts[start : start + batch_size]):
                raise ValueError("scorer returned a mismatched score count")
            scores.extend(float(s) for s in batch_scores)
        fallback = False
    except Exception as exc:
        if warn:
            warn(f"reranker {scorer.scorer_id} failed ({exc}); falling back to fusion order")
        scores = [p.fused_score for p in pool]
        fallback = True
    ranked = sorted(zip(pool, scores), key=lambda e: (-e[1], e[0].passage_id))
    return RerankedSet(entries=tuple(ranked[: min(k, len(ranked))]), retained_k=k, fallback=fallback)
