"""The query engine: moderation through synthesis as one event stream.

``Engine.run`` is a generator of ``ProgressEvent``s in the stage order

    accepted -> (blocked | decomposed -> retrieved -> reranked ->
    quotes_extracted -> outline -> (section -> table?)* -> done)

with warning events interleaved as stages degrade. Each section event is
emitted the moment its synthesis finishes, before the next section
starts. Any internal failure ends the stream with a single error event;
sections already emitted stay valid and the partial report is persisted.

Wall-clock and id generation are injectable so scripted runs are
bit-identical, which the tests rely on.
"""

from __future__ import annotations

import secrets
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

from . import events as ev
from .corpus import Corpus
from .events import ProgressEvent
from .gateway import Gateway, Moderator, moderate_query
from .index import HybridIndex
from .rerank import RerankScorer, TokenOverlapScorer, rerank_top_k
from .retrieval import decompose, retrieve
from .store import ReportStore
from .synthesis import (
    Diagnostics,
    MarkerRegistry,
    Report,
    build_reference_pool,
    cited_corpus_papers,
    extract_quotes,
    follow_citations,
    generate_section,
    generate_table,
    plan_outline,
)


@dataclass
class EngineSettings:
    snippet_cap: int = 256
    abstract_cap: int = 20
    rerank_k: int = 50
    table_tau: float = 0.5
    cell_context_chars: int = 6000
    moderation_fail_closed: bool = True


def _random_report_id() -> str:
    return secrets.token_hex(16)


@dataclass
class Engine:
    """Everything a query needs, bound once; safe for concurrent runs.

    All mutable state lives per-run, so interleaved queries never share
    anything but the immutable corpus, index, and providers.
    """

    corpus: Corpus
    index: HybridIndex
    gateway: Gateway
    scorer: RerankScorer = field(default_factory=TokenOverlapScorer)
    moderator: Moderator | None = None
    store: ReportStore | None = None
    settings: EngineSettings = field(default_factory=EngineSettings)
    clock: Callable[[], float] = time.time
    id_factory: Callable[[], str] = _random_report_id

    def run(self, query: str) -> Iterator[ProgressEvent]:
        yield from _Run(self, query).events()

    def ask(self, query: str, on_event: Callable[[ProgressEvent], None] | None = None) -> Report:
        """Drive a query to completion and return its report."""
        run = _Run(self, query)
        for event in run.events():
            if on_event:
                on_event(event)
        return run.report


class _Run:
    """Single-query state: seq counter, diagnostics, report assembly."""

    def __init__(self, engine: Engine, query: str):
        self.engine = engine
        self.query = query
        self.report_id = engine.id_factory()
        self.seq = 0
        self.diagnostics = Diagnostics()
        self._warned = 0
        self.report = Report(query=query, sections=[], diagnostics=self.diagnostics)
        self._finalized = False

    def _event(self, kind: str, payload: dict) -> ProgressEvent:
        event = ProgressEvent(
            report_id=self.report_id,
            seq=self.seq,
            kind=kind,
            payload=payload,
            timestamp=self.engine.clock(),
        )
        self.seq += 1
        if self.engine.store is not None:
            self.engine.store.append_event(event)
        return event

    def _drain_warnings(self, stage: str) -> Iterator[ProgressEvent]:
        while self._warned < len(self.diagnostics.warnings):
            message = self.diagnostics.warnings[self._warned]
            self._warned += 1
            yield self._event(ev.WARNING, {"stage": stage, "message": message})

    def _finalize(self) -> None:
        if self._finalized or self.engine.store is None:
            return
        doc = {"report_id": self.report_id, **self.report.to_json()}
        self.engine.store.finalize_report(self.report_id, doc)
        self._finalized = True

    def events(self) -> Iterator[ProgressEvent]:
        engine = self.engine
        yield self._event(ev.ACCEPTED, {"query": self.query})

        verdict = moderate_query(
            self.query, engine.moderator, fail_closed=engine.settings.moderation_fail_closed
        )
        if not verdict.allowed:
            yield self._event(ev.BLOCKED, {"reason": verdict.reason or "blocked"})
            self.diagnostics.error = f"blocked: {verdict.reason}"
            self._finalize()
            return

        stage = "decompose"
        try:
            dq = decompose(self.query, engine.gateway, warn=self.diagnostics.warn)
            yield from self._drain_warnings(stage)
            yield self._event(
                ev.DECOMPOSED,
                {
                    "keyword_query": dq.keyword_query,
                    "semantic_query": dq.semantic_query,
                    "filter": _filter_json(dq.filter),
                },
            )

            stage = "retrieve"
            candidates = retrieve(
                dq,
                engine.index,
                snippet_cap=engine.settings.snippet_cap,
                abstract_cap=engine.settings.abstract_cap,
            )
            yield self._event(
                ev.RETRIEVED,
                {"n_snippets": len(candidates.snippets), "n_abstracts": len(candidates.abstracts)},
            )

            stage = "rerank"
            reranked = rerank_top_k(
                self.query,
                candidates,
                engine.scorer,
                k=engine.settings.rerank_k,
                warn=self.diagnostics.warn,
            )
            yield from self._drain_warnings(stage)
            yield self._event(ev.RERANKED, {"k": len(reranked)})

            stage = "extract_quotes"
            quotes = extract_quotes(
                self.query, reranked, engine.corpus, engine.gateway, self.diagnostics
            )
            yield from self._drain_warnings(stage)
            yield self._event(
                ev.QUOTES_EXTRACTED,
                {
                    "n_quotes": len(quotes),
                    "n_papers": len({q.paper_id for q in quotes}),
                },
            )

            stage = "outline"
            outline = plan_outline(self.query, quotes, engine.gateway, self.diagnostics)
            yield from self._drain_warnings(stage)
            yield self._event(
                ev.OUTLINE,
                {
                    "sections": [
                        {
                            "position": s.position,
                            "title": s.title,
                            "format": s.format,
                            "n_quotes": len(s.assigned_quote_ids),
                        }
                        for s in outline
                    ],
                    "fallback": self.diagnostics.outline_fallback,
                },
            )

            quotes_by_id = {q.quote_id: q for q in quotes}
            registry = MarkerRegistry()
            for plan in outline:
                stage = f"section:{plan.position}"
                section_quotes = [quotes_by_id[qid] for qid in plan.assigned_quote_ids]
                followed = follow_citations(section_quotes, engine.corpus, self.diagnostics)
                pool = build_reference_pool(section_quotes, followed, engine.corpus, registry)
                section = generate_section(
                    self.query,
                    outline,
                    plan.position,
                    self.report.sections,
                    pool,
                    engine.gateway,
                    self.diagnostics,
                )
                self.report.sections.append(section)
                yield from self._drain_warnings(stage)
                yield self._event(
                    ev.SECTION, {"position": section.position, "section": section.to_json()}
                )

                stage = f"table:{plan.position}"
                cited = cited_corpus_papers(section, engine.corpus)
                table = generate_table(
                    self.query,
                    section,
                    cited,
                    engine.corpus,
                    engine.gateway,
                    self.diagnostics,
                    tau=engine.settings.table_tau,
                    cell_context_chars=engine.settings.cell_context_chars,
                )
                yield from self._drain_warnings(stage)
                if table is not None:
                    section.table = table
                    yield self._event(
                        ev.TABLE, {"position": section.position, "table": table.to_json()}
                    )

            self._finalize()
            yield self._event(ev.DONE, {"n_sections": len(self.report.sections)})
        except Exception as exc:  # stage bug or unrecoverable dependency
            self.diagnostics.error = f"{stage}: {exc}"
            self._finalize()
            yield self._event(ev.ERROR, {"stage": stage, "message": str(exc)})


def _filter_json(flt) -> dict:
    return {
        "year_range": list(flt.year_range) if flt.year_range else None,
        "venues": sorted(flt.venues) if flt.venues else None,
        "fields_of_study": sorted(flt.fields_of_study) if flt.fields_of_study else None,
    }
