"""Retrieval metrics, ensemble-weight sweeps, and citation attribution.

Metrics are deterministic and pure: graded nDCG@k with gain 2^grade - 1
and log2 discount (the standard form), and mean reciprocal rank over a
relevance threshold. The sweep harness re-runs hybrid search across a
grid of dense weights and reports both metrics per row.

Citation scoring follows the entailment-judging recipe: every sentence of
a report body is a claim; precision is the fraction of (claim, citation)
pairs judged Attributable, recall the fraction of claims whose combined
citation evidence is judged Attributable. Model-memory citations count as
non-attributable evidence, and by default uncited sentences stay in the
recall denominator (a report full of uncited prose scores low).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .gateway import ATTRIBUTION_JUDGE, Gateway, GatewayError, RELEVANCE_LABEL
from .index import HybridIndex, MetadataFilter
from .tokenizer import DefaultTokenizer

ATTRIBUTABLE = "Attributable"
CONTRADICTORY = "Contradictory"
EXTRAPOLATORY = "Extrapolatory"
VERDICTS = (ATTRIBUTABLE, CONTRADICTORY, EXTRAPOLATORY)

_MARKER_GROUP = re.compile(r"\[([^\[\]]+)\]")


@dataclass(frozen=True)
class AttributionVerdict:
    """One judged (claim, citation) pair."""

    claim: str
    citation: str  # marker, or "combined" for the recall-side judgment
    verdict: str

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")


@dataclass(frozen=True)
class RelevanceLabel:
    query_id: str
    passage_id: str
    grade: int

    def __post_init__(self):
        if not 0 <= self.grade <= 3:
            raise ValueError(f"grade {self.grade} outside 0-3")


def load_labels(path: str | Path) -> dict[str, dict[str, int]]:
    """Line-delimited {query_id, passage_id, grade} -> nested mapping."""
    labels: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            rec = RelevanceLabel(obj["query_id"], obj["passage_id"], int(obj["grade"]))
            labels.setdefault(rec.query_id, {})[rec.passage_id] = rec.grade
    return labels


def load_runs(path: str | Path) -> dict[str, list[str]]:
    """Line-delimited {query_id, ranking: [passage ids]}."""
    runs: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            runs[obj["query_id"]] = list(obj["ranking"])
    return runs


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------


def ndcg_at_k(ranking: Sequence[str], labels: Mapping[str, int], k: int = 10) -> float:
    """Graded nDCG@k; unlabeled items count as grade 0.

    The ideal DCG comes from the full label set for the query, so leaving
    a known-relevant passage out of the ranking costs score. An all-zero
    label set defines nDCG = 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dcg = 0.0
    for i, pid in enumerate(ranking[:k], start=1):
        grade = labels.get(pid, 0)
        dcg += (2.0**grade - 1.0) / math.log2(i + 1)
    ideal = 0.0
    for i, grade in enumerate(sorted(labels.values(), reverse=True)[:k], start=1):
        ideal += (2.0**grade - 1.0) / math.log2(i + 1)
    if ideal == 0.0:
        return 0.0
    return dcg / ideal


def mrr(
    rankings: Mapping[str, Sequence[str]],
    labels: Mapping[str, Mapping[str, int]],
    relevant_threshold: int = 1,
) -> float:
    """Mean over queries of 1/rank of the first relevant item (0 if none)."""
    if not rankings:
        raise ValueError("mrr needs at least one query")
    total = 0.0
    for qid, ranking in rankings.items():
        qlabels = labels.get(qid, {})
        for i, pid in enumerate(ranking, start=1):
            if qlabels.get(pid, 0) >= relevant_threshold:
                total += 1.0 / i
                break
    return total / len(rankings)


# ---------------------------------------------------------------------------
# Ensemble-weight sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    w_dense: float
    ndcg_at_10: float
    mrr: float


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    best: SweepRow

    def to_json(self) -> dict:
        return {
            "rows": [
                {"w_dense": r.w_dense, "ndcg_at_10": r.ndcg_at_10, "mrr": r.mrr}
                for r in self.rows
            ],
            "best": {
                "w_dense": self.best.w_dense,
                "ndcg_at_10": self.best.ndcg_at_10,
                "mrr": self.best.mrr,
            },
        }


def sweep_weights(
    queries: Sequence[tuple[str, str]],
    labels: Mapping[str, Mapping[str, int]],
    index: HybridIndex,
    grid: Sequence[float],
    k: int = 10,
    rank_depth: int = 100,
    flt: MetadataFilter | None = None,
) -> SweepResult:
    """Evaluate nDCG@k and mRR for each dense weight in the grid.

    The best row is the first grid entry attaining the maximum
    (nDCG, then mRR), so reruns are stable.
    """
    if not grid:
        raise ValueError("sweep needs a non-empty weight grid")
    embeddings = {qid: index.embed_query(text) for qid, text in queries}
    rows: list[SweepRow] = []
    for w in grid:
        cfg = replace(index.config, w_dense=float(w), w_sparse=1.0 - float(w))
        rankings: dict[str, list[str]] = {}
        per_query_ndcg: list[float] = []
        for qid, text in queries:
            hits = index.search_hybrid(
                text, embeddings[qid], flt, k=rank_depth, config=cfg
            )
            ranking = [h.passage_id for h in hits]
            rankings[qid] = ranking
            per_query_ndcg.append(ndcg_at_k(ranking, labels.get(qid, {}), k=k))
        rows.append(
            SweepRow(
                w_dense=float(w),
                ndcg_at_10=sum(per_query_ndcg) / len(per_query_ndcg) if per_query_ndcg else 0.0,
                mrr=mrr(rankings, labels),
            )
        )
    best = rows[0]
    for row in rows[1:]:
        if (row.ndcg_at_10, row.mrr) > (best.ndcg_at_10, best.mrr):
            best = row
    return SweepResult(rows=tuple(rows), best=best)


# ---------------------------------------------------------------------------
# Citation attribution
# ---------------------------------------------------------------------------


class AttributionJudge(Protocol):
    def judge(self, claim: str, evidence: str) -> str: ...


class FixedJudge:
    """Every pair gets the same verdict (baseline/testing)."""

    def __init__(self, verdict: str = ATTRIBUTABLE):
        if verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {verdict!r}")
        self.verdict = verdict

    def judge(self, claim: str, evidence: str) -> str:
        return self.verdict


class ScriptedJudge:
    """Claim-keyed verdict table; unknown claims are a hard error."""

    def __init__(self, verdicts: Mapping[str, str]):
        self.verdicts = dict(verdicts)

    def judge(self, claim: str, evidence: str) -> str:
        if claim not in self.verdicts:
            raise KeyError(f"no scripted verdict for claim {claim[:60]!r}")
        return self.verdicts[claim]

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedJudge":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


class GatewayJudge:
    """Entailment judging through the chat gateway's judge template."""

    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def judge(self, claim: str, evidence: str) -> str:
        obj = self.gateway.complete_json(
            ATTRIBUTION_JUDGE, {"claim": claim, "ref_excerpt": evidence}
        )
        verdict = obj.get("output") if isinstance(obj, dict) else None
        if verdict not in VERDICTS:
            raise GatewayError(f"judge returned invalid verdict {verdict!r}")
        return verdict


@dataclass
class CitationScores:
    precision: float
    recall: float
    n_claims: int
    n_cited_claims: int
    n_pairs: int
    warnings: list[str]
    verdicts: list[AttributionVerdict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "n_claims": self.n_claims,
            "n_cited_claims": self.n_cited_claims,
            "n_pairs": self.n_pairs,
            "warnings": list(self.warnings),
        }


_sentence_splitter = DefaultTokenizer()


def _strip_markers(text: str) -> str:
    return " ".join(_MARKER_GROUP.sub(" ", text).split())


def _claims_of_body(body: str) -> list[tuple[str, list[str]]]:
    """(claim text, distinct markers) per sentence of one section body."""
    claims = []
    for line in body.splitlines():
        line = line.strip().lstrip("-*").strip()
        if not line:
            continue
        for span in _sentence_splitter.sentences(line):
            sentence = line[span.start : span.end].strip()
            if not sentence:
                continue
            markers = list(dict.fromkeys(m.strip() for g in _MARKER_GROUP.findall(sentence) for m in g.split(",")))
            claim = _strip_markers(sentence)
            if claim:
                claims.append((claim, [m for m in markers if m]))
    return claims


def citation_scores(
    report: Mapping, judge: AttributionJudge, cited_only: bool = False
) -> CitationScores:
    """ALCE-style citation precision and recall over a report document.

    ``cited_only=True`` restricts the recall denominator to cited claims;
    the default counts every claim, penalizing uncited prose.
    """
    warnings: list[str] = []
    verdicts: list[AttributionVerdict] = []

    def safe_judge(claim: str, citation: str, evidence: str) -> str:
        try:
            verdict = judge.judge(claim, evidence)
        except Exception as exc:
            warnings.append(f"judge failed for claim {claim[:40]!r}: {exc}")
            verdict = EXTRAPOLATORY
        if verdict not in VERDICTS:
            warnings.append(f"invalid verdict {verdict!r}; treated as extrapolatory")
            verdict = EXTRAPOLATORY
        verdicts.append(AttributionVerdict(claim=claim, citation=citation, verdict=verdict))
        return verdict

    n_claims = 0
    n_cited = 0
    recall_hits = 0
    n_pairs = 0
    precision_hits = 0
    for section in report.get("sections", []):
        citations = section.get("citations", {})
        for claim, markers in _claims_of_body(section.get("body", "")):
            n_claims += 1
            evidences: list[str] = []
            for marker in markers:
                ref = citations.get(marker)
                if ref is None:
                    warnings.append(f"marker {marker!r} missing from citations map")
                    continue
                n_pairs += 1
                if ref.get("kind") == "memory":
                    verdicts.append(
                        AttributionVerdict(claim=claim, citation=marker, verdict=EXTRAPOLATORY)
                    )
                    continue  # counts as a non-attributable pair
                evidence = ref.get("text") or ""
                evidences.append(evidence)
                if safe_judge(claim, marker, evidence) == ATTRIBUTABLE:
                    precision_hits += 1
            if markers:
                n_cited += 1
                combined = "\n".join(e for e in evidences if e)
                if combined and safe_judge(claim, "combined", combined) == ATTRIBUTABLE:
                    recall_hits += 1
    precision = precision_hits / n_pairs if n_pairs else 0.0
    denominator = n_cited if cited_only else n_claims
    recall = recall_hits / denominator if denominator else 0.0
    return CitationScores(
        precision=precision,
        recall=recall,
        n_claims=n_claims,
        n_cited_claims=n_cited,
        n_pairs=n_pairs,
        warnings=warnings,
        verdicts=verdicts,
    )


# ---------------------------------------------------------------------------
# Relevance label generation (offline hook)
# ---------------------------------------------------------------------------


def generate_relevance_labels(
    query_id: str,
    query: str,
    passages: Sequence[tuple[str, str]],
    gateway: Gateway,
    on_error: Callable[[str], None] | None = None,
) -> list[RelevanceLabel]:
    """Binary labels via the relevance prompt; failures default to 0."""
    labels = []
    for pid, text in passages:
        grade = 0
        try:
            result = gateway.complete(RELEVANCE_LABEL, {"question": query, "text": text})
            grade = 1 if result.text.strip().startswith("1") else 0
        except GatewayError as exc:
            if on_error:
                on_error(f"labeling failed for {pid}: {exc}")
        labels.append(RelevanceLabel(query_id=query_id, passage_id=pid, grade=grade))
    return labels
