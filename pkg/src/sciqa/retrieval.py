"""Query decomposition and dual-arm candidate retrieval.

A user query is first rewritten into a keyword form and a semantic
paraphrase, plus any metadata constraints the user asked for. Retrieval
then runs two arms against the hybrid index:

  * snippets: one hybrid search over all passages, dense side driven by
    the semantic paraphrase, sparse side by the keyword form (up to 256);
  * abstracts: a keyword-only search restricted to abstract and title
    passages (up to 20).

Decomposition degrades instead of failing: any gateway problem falls back
to the original query text and an empty filter, so no query dies between
moderation and synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .embedding import embed
from .gateway import DECOMPOSE, Gateway, GatewayError
from .index import HybridIndex, MetadataFilter, ScoredPassage

SNIPPET_CAP = 256
ABSTRACT_CAP = 20

WarnFn = Callable[[str], None]


@dataclass(frozen=True)
class DecomposedQuery:
    original: str
    keyword_query: str
    semantic_query: str
    filter: MetadataFilter = MetadataFilter()

    @classmethod
    def degraded(cls, query: str) -> "DecomposedQuery":
        return cls(original=query, keyword_query=query, semantic_query=query)


@dataclass
class CandidateSet:
    snippets: list[ScoredPassage] = field(default_factory=list)
    abstracts: list[ScoredPassage] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.snippets) + len(self.abstracts)

    def all_candidates(self) -> list[ScoredPassage]:
        return list(self.snippets) + list(self.abstracts)

    def to_json(self) -> dict:
        return {
            "snippets": [_scored_to_json(s) for s in self.snippets],
            "abstracts": [_scored_to_json(s) for s in self.abstracts],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CandidateSet":
        return cls(
            snippets=[_scored_from_json(r) for r in obj.get("snippets", [])],
            abstracts=[_scored_from_json(r) for r in obj.get("abstracts", [])],
        )


def _scored_to_json(s: ScoredPassage) -> dict:
    return {
        "passage_id": s.passage_id,
        "paper_id": s.paper_id,
        "kind": s.kind,
        "field_key": s.field_key,
        "section_path": s.section_path,
        "text": s.text,
        "char_span": list(s.char_span),
        "dense_score": s.dense_score,
        "sparse_score_raw": s.sparse_score_raw,
        "sparse_score_norm": s.sparse_score_norm,
        "fused_score": s.fused_score,
        "provenance": s.provenance,
    }


def _scored_from_json(r: dict) -> ScoredPassage:
    return ScoredPassage(
        passage_id=r["passage_id"],
        paper_id=r["paper_id"],
        kind=r.get("kind", "body"),
        field_key=r.get("field_key", "abstract"),
        section_path=r.get("section_path", ""),
        text=r.get("text", ""),
        char_span=tuple(r.get("char_span", (0, 0))),
        dense_score=float(r.get("dense_score", 0.0)),
        sparse_score_raw=float(r.get("sparse_score_raw", 0.0)),
        sparse_score_norm=float(r.get("sparse_score_norm", 0.0)),
        fused_score=float(r.get("fused_score", 0.0)),
        provenance=r.get("provenance", "both"),
    )


def _parse_filter(obj: dict) -> MetadataFilter:
    year_min = obj.get("year_min")
    year_max = obj.get("year_max")
    year_range = None
    if isinstance(year_min, int) or isinstance(year_max, int):
        lo = year_min if isinstance(year_min, int) else None
        hi = year_max if isinstance(year_max, int) else None
        if lo is not None and hi is not None and lo > hi:
            lo, hi = hi, lo
        year_range = (lo, hi)
    venues = obj.get("venues")
    fos = obj.get("fields_of_study")
    return MetadataFilter(
        year_range=year_range,
        venues=frozenset(v for v in venues if isinstance(v, str)) if isinstance(venues, list) and venues else None,
        fields_of_study=frozenset(f for f in fos if isinstance(f, str)) if isinstance(fos, list) and fos else None,
    )


def decompose(query: str, gateway: Gateway, warn: WarnFn | None = None) -> DecomposedQuery:
    """Rewrite the query per retrieval arm; degrade on any gateway failure."""
    try:
        obj = gateway.complete_json(DECOMPOSE, {"query": query})
    except GatewayError as exc:
        if warn:
            warn(f"query decomposition failed ({exc}); using the raw query")
        return DecomposedQuery.degraded(query)
    if not isinstance(obj, dict):
        if warn:
            warn("query decomposition returned a non-object; using the raw query")
        return DecomposedQuery.degraded(query)
    keyword = obj.get("keyword")
    semantic = obj.get("semantic")
    return DecomposedQuery(
        original=query,
        keyword_query=keyword if isinstance(keyword, str) and keyword.strip() else query,
        semantic_query=semantic if isinstance(semantic, str) and semantic.strip() else query,
        filter=_parse_filter(obj),
    )


def retrieve(
    dq: DecomposedQuery,
    index: HybridIndex,
    snippet_cap: int = SNIPPET_CAP,
    abstract_cap: int = ABSTRACT_CAP,
) -> CandidateSet:
    """Run both retrieval arms and dedup across them.

    A passage reachable via both arms keeps only its higher-fused-score
    slot. Caps are hard; the result never exceeds snippet_cap + abstract_cap
    candidates.
    """
    if len(index) == 0:
        return CandidateSet()
    query_embedding = (
        embed([dq.semantic_query], index.provider)[0]
        if index.provider is not None
        else None
    )
    if query_embedding is None:
        snippets = index.search_sparse(dq.keyword_query, dq.filter, k=snippet_cap)
    else:
        snippets = index.search_hybrid(
            dq.keyword_query, query_embedding, dq.filter, k=snippet_cap
        )
    abstracts = index.search_sparse(
        dq.keyword_query, dq.filter, k=abstract_cap, kinds=frozenset({"abstract", "title"})
    )

    snip_by_id = {s.passage_id: s for s in snippets}
    deduped_abstracts = []
    drop_from_snippets: set[str] = set()
    for a in abstracts:
        twin = snip_by_id.get(a.passage_id)
        if twin is None:
            deduped_abstracts.append(a)
        elif a.fused_score > twin.fused_score:
            deduped_abstracts.append(a)
            drop_from_snippets.add(a.passage_id)
    kept_snippets = [s for s in snippets if s.passage_id not in drop_from_snippets]
    return CandidateSet(snippets=kept_snippets, abstracts=deduped_abstracts)
