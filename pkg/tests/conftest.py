"""Shared fixtures: a small paper corpus with citation anchors, scripted
gateway responses that drive the full pipeline deterministically, and an
engine factory with an injectable clock so runs are bit-identical."""

from __future__ import annotations

import itertools
import json

import pytest

from sciqa.corpus import BodySection, CitationAnchor, Corpus, Paper, chunk_paper
from sciqa.embedding import HashEmbeddingProvider
from sciqa.gateway import (
    ASSIGN_QUOTES,
    DECOMPOSE,
    DenylistModerator,
    EXTRACT_QUOTES,
    Gateway,
    OUTLINE,
    SECTION,
    ScriptEntry,
    ScriptedProvider,
    TABLE_ASPECTS,
    TABLE_VALUE,
)
from sciqa.index import IndexConfig, build_index
from sciqa.pipeline import Engine, EngineSettings
from sciqa.rerank import TokenOverlapScorer
from sciqa.store import ReportStore

P1_ANCHOR_TEXT = "exact term matching"


def make_corpus() -> Corpus:
    p1_abstract = (
        "Sparse retrieval uses exact term matching. "
        "It remains a strong baseline for scientific search."
    )
    anchor_start = p1_abstract.index(P1_ANCHOR_TEXT)
    papers = [
        Paper(
            paper_id="P1",
            title="Sparse retrieval for science",
            abstract=p1_abstract,
            venue="ACL",
            year=2020,
            fields_of_study=frozenset({"Computer Science"}),
            body_sections=(
                BodySection(
                    "Methods",
                    "We combine term weighting with document length normalization. "
                    "Long documents receive a penalty so short relevant passages win.",
                ),
            ),
            citations=(
                CitationAnchor(
                    field="abstract",
                    start=anchor_start,
                    end=anchor_start + len(P1_ANCHOR_TEXT),
                    cited_paper_id="P4",
                ),
            ),
        ),
        Paper(
            paper_id="P2",
            title="Dense embeddings for papers",
            abstract=(
                "Dense embeddings capture semantic similarity. "
                "Binary codes keep the index small."
            ),
            venue="NeurIPS",
            year=2022,
            fields_of_study=frozenset({"Computer Science"}),
            body_sections=(
                BodySection(
                    "Analysis",
                    "Quantized vectors lose little ranking quality. "
                    "Asymmetric scoring recovers most of the gap.",
                ),
            ),
        ),
        Paper(
            paper_id="P3",
            title="Hybrid ranking systems",
            abstract=(
                "Hybrid systems fuse sparse and dense scores. "
                "A weighted sum is simple and effective."
            ),
            venue="SIGIR",
            year=2023,
            fields_of_study=frozenset({"Computer Science"}),
        ),
        Paper(
            paper_id="P4",
            title="Foundations of term weighting",
            abstract="Term weighting balances frequency and rarity across a collection.",
            venue="CACM",
            year=1988,
            fields_of_study=frozenset({"Computer Science"}),
        ),
        Paper(
            paper_id="P5",
            title="Neural rerankers",
            abstract=(
                "Cross encoders score query and passage jointly. "
                "They improve precision at the top ranks."
            ),
            venue="EMNLP",
            year=2021,
            fields_of_study=frozenset({"Computer Science"}),
        ),
    ]
    return Corpus(papers)


QUOTE_SCRIPTS = {
    "P1": (
        "Sparse retrieval uses exact term matching. ... "
        "Long documents receive a penalty so short relevant passages win."
    ),
    "P2": (
        "Binary codes keep the index small. ... "
        "Asymmetric scoring recovers most of the gap."
    ),
    "P3": "Hybrid systems fuse sparse and dense scores.",
    "P4": "NONE",
    "P5": "NONE",
}

# Assignment superset: quote ids are assigned q1..qn in processing order, so
# covering more ids than exist is harmless and keeps the script order-proof.
_ASSIGN_ALL = {
    "assignments": {"q1": [0, 1], **{f"q{i}": [1] for i in range(2, 13)}},
}


def make_script(queries: list[str], outline_with_intro: bool = True) -> list[ScriptEntry]:
    """Scripted responses that cover the full pipeline for each query."""
    entries: list[ScriptEntry] = []
    for q in queries:
        entries.append(
            ScriptEntry(
                DECOMPOSE,
                response=json.dumps({"keyword": q, "semantic": q}),
                where={"query": q},
            )
        )
        first = (
            {"title": "Background", "format": "paragraph"}
            if outline_with_intro
            else {"title": "Key approaches", "format": "paragraph"}
        )
        entries.append(
            ScriptEntry(
                OUTLINE,
                response=json.dumps(
                    {"sections": [first, {"title": "Fusion approaches", "format": "bullets"}]}
                ),
                where={"query": q},
            )
        )
    for pid, response in QUOTE_SCRIPTS.items():
        entries.append(ScriptEntry(EXTRACT_QUOTES, response=response, where={"paper_id": pid}))
    entries.append(ScriptEntry(ASSIGN_QUOTES, response=json.dumps(_ASSIGN_ALL)))
    entries.append(
        ScriptEntry(
            SECTION,
            response=json.dumps(
                {
                    "tldr": "What the retrieval landscape looks like.",
                    "body": (
                        "Retrieval systems combine several signals [Q1]. "
                        "Some framing here rests on model knowledge [M]."
                    ),
                }
            ),
            where={"title": "Background"},
        )
    )
    entries.append(
        ScriptEntry(
            SECTION,
            response=json.dumps(
                {
                    "tldr": "Sparse, dense, and fused rankers each contribute.",
                    "body": (
                        "- Sparse matching remains strong [Q1].\n"
                        "- Binary codes compress the index [Q2].\n"
                        "- Fusing both improves ranking [Q3, Q4].\n"
                        "- Foundational weighting ideas still apply [A1]."
                    ),
                }
            ),
            where={"title": "Fusion approaches"},
        )
    )
    entries.append(
        ScriptEntry(
            SECTION,
            response=json.dumps(
                {"tldr": "Key approaches overview.", "body": "Several approaches compete [Q2]."}
            ),
            where={"title": "Key approaches"},
        )
    )
    entries.append(
        ScriptEntry(
            SECTION,
            response=json.dumps(
                {"tldr": "Plain intro.", "body": "This section sets the stage [M]."}
            ),
            where={"title": "Introduction"},
        )
    )
    entries.append(
        ScriptEntry(
            TABLE_ASPECTS,
            response=json.dumps({"aspects": ["Approach", "Strength"]}),
            where={"section_title": "Fusion approaches"},
        )
    )
    cell_values = {
        ("P1", "Approach"): {"value": "sparse term matching", "evidence": "exact term matching"},
        ("P1", "Strength"): {"value": "strong baseline", "evidence": "a strong baseline"},
        ("P2", "Approach"): {"value": "dense binary codes", "evidence": "Binary codes keep the index small"},
        ("P2", "Strength"): {"value": "MISSING"},
        ("P3", "Approach"): {"value": "weighted fusion", "evidence": "A weighted sum is simple"},
        ("P3", "Strength"): {"value": "simple and effective", "evidence": "simple and effective"},
        ("P4", "Approach"): {"value": "term weighting", "evidence": "Term weighting balances"},
        ("P4", "Strength"): {"value": "foundational", "evidence": "balances frequency and rarity"},
        ("P5", "Approach"): {"value": "cross encoding", "evidence": "score query and passage jointly"},
        ("P5", "Strength"): {"value": "top-rank precision", "evidence": "improve precision at the top"},
    }
    for (pid, aspect), value in cell_values.items():
        entries.append(
            ScriptEntry(
                TABLE_VALUE,
                response=json.dumps(value),
                where={"paper_id": pid, "aspect": aspect},
            )
        )
    return entries


class FakeClock:
    """Monotonic fake time; makes event streams bit-identical across runs."""

    def __init__(self, start: float = 1000.0, step: float = 1.0):
        self._t = itertools.count()
        self.start = start
        self.step = step

    def __call__(self) -> float:
        return self.start + next(self._t) * self.step


def make_id_factory(prefix: str = "ab"):
    counter = itertools.count()

    def factory() -> str:
        return f"{prefix}{next(counter):030x}"

    return factory


@pytest.fixture
def corpus() -> Corpus:
    return make_corpus()


@pytest.fixture
def provider() -> HashEmbeddingProvider:
    return HashEmbeddingProvider(dim=64, seed=7)


@pytest.fixture
def hybrid_index(corpus, provider):
    passages = [p for paper in corpus for p in chunk_paper(paper)]
    return build_index(passages, provider, IndexConfig(), papers=corpus)


def make_engine(
    corpus,
    index,
    script=None,
    queries=("how do hybrid retrieval systems rank scientific papers?",),
    store=None,
    denylist=("forbidden topic",),
    settings=None,
):
    script = script if script is not None else make_script(list(queries))
    gateway = Gateway(ScriptedProvider(script))
    return Engine(
        corpus=corpus,
        index=index,
        gateway=gateway,
        scorer=TokenOverlapScorer(),
        moderator=DenylistModerator(denylist),
        store=store,
        settings=settings or EngineSettings(),
        clock=FakeClock(),
        id_factory=make_id_factory(),
    )


@pytest.fixture
def engine(corpus, hybrid_index, tmp_path):
    store = ReportStore(tmp_path / "reports")
    return make_engine(corpus, hybrid_index, store=store)
