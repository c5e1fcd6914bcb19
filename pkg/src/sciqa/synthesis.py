"""Multi-step report synthesis from reranked passages.

The generation phase runs three steps. First, each paper's reranked
passages are concatenated to its abstract and an LLM call extracts
verbatim quotes (fragments separated by ellipses); fragments that fail
whitespace-normalized verbatim verification are dropped, and papers whose
response is empty or NONE are discarded. Second, an outline of themed
sections (each a paragraph or a bulleted list, the first always an
introduction or background) is planned and the quotes are assigned to
sections. Third, sections are written serially, each conditioned on the
query, its assigned quotes plus the abstracts of papers those quotes cite
(citation following), and all earlier sections. Claims cite bracketed
marker ids assigned by the pipeline; anything the model cannot ground is
cited as model memory ([M]). Bulleted sections citing two or more corpus
papers additionally get a comparison table whose sparse columns and rows
are filtered away.

Everything degrades instead of failing: a dead provider yields a
single-section fallback outline, placeholder section bodies, or missing
table cells, never a lost query.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

from .corpus import Corpus
from .gateway import (
    ASSIGN_QUOTES,
    EXTRACT_QUOTES,
    Gateway,
    GatewayError,
    MalformedOutputError,
    OUTLINE,
    SECTION,
    TABLE_ASPECTS,
    TABLE_VALUE,
)
from .rerank import RerankedSet
from .tokenizer import normalize_ws

MEMORY_MARKER = "M"
MISSING = "MISSING"
PARAGRAPH = "paragraph"
BULLETS = "bullets"

IRRELEVANT_SENTINEL = "NONE"
_ELLIPSIS_SPLIT = re.compile(r"\s*(?:\.\.\.|…)\s*")
_MARKER_GROUP = re.compile(r"\[([^\[\]]+)\]")
_INTRO_WORDS = ("introduction", "background", "overview")

WarnFn = Callable[[str], None]


@dataclass
class Diagnostics:
    """Counters surfaced in the report so degradation stays visible."""

    dropped_quotes: int = 0
    memory_citations: int = 0
    discarded_papers: int = 0
    missing_cited: int = 0
    unassigned_quotes: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    outline_fallback: bool = False
    error: str | None = None

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def to_json(self) -> dict:
        out = {
            "dropped_quotes": self.dropped_quotes,
            "memory_citations": self.memory_citations,
            "discarded_papers": self.discarded_papers,
            "missing_cited": self.missing_cited,
            "unassigned_quotes": list(self.unassigned_quotes),
            "warnings": list(self.warnings),
            "outline_fallback": self.outline_fallback,
        }
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass(frozen=True)
class PaperContext:
    """One paper's evidence: abstract plus its reranked passages, in order."""

    paper_id: str
    title: str
    assembled_text: str
    # (unit id, offset into assembled_text, field key, field offset, length)
    units: tuple[tuple[str, int, str, int, int], ...]

    def source_passage_ids(self) -> list[str]:
        return [u[0] for u in self.units if u[0] != "abstract"]


@dataclass(frozen=True)
class Quote:
    quote_id: str
    paper_id: str
    text: str
    resolved_unit: str  # "abstract" or a passage id
    resolved_span: tuple[int, int]  # within the unit's text
    field_key: str
    field_span: tuple[int, int]  # within the paper field's text
    embedded_citations: tuple[str, ...] = ()

    @property
    def marker(self) -> str:
        return self.quote_id.upper()


@dataclass
class OutlineSection:
    title: str
    format: str
    position: int
    assigned_quote_ids: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class CitationRef:
    marker: str
    kind: str  # "quote" | "abstract" | "memory"
    paper_id: str | None = None
    quote_id: str | None = None
    text: str = ""
    paper_title: str = ""

    def to_json(self) -> dict:
        if self.kind == "memory":
            return {"kind": "memory"}
        out = {
            "kind": self.kind,
            "paper_id": self.paper_id,
            "text": self.text,
            "paper_title": self.paper_title,
        }
        if self.quote_id is not None:
            out["quote_id"] = self.quote_id
        return out


@dataclass
class Cell:
    value: str
    evidence: str | None = None


@dataclass
class ComparisonTable:
    position: int
    columns: list[str]
    rows: list[str]
    cells: dict[tuple[int, int], Cell | None]  # None means MISSING

    def missing_fraction_col(self, c: int) -> float:
        if not self.rows:
            return 1.0
        return sum(1 for r in range(len(self.rows)) if self.cells.get((r, c)) is None) / len(
            self.rows
        )

    def missing_fraction_row(self, r: int) -> float:
        if not self.columns:
            return 1.0
        return sum(1 for c in range(len(self.columns)) if self.cells.get((r, c)) is None) / len(
            self.columns
        )

    def to_json(self) -> dict:
        grid = []
        for r in range(len(self.rows)):
            row = []
            for c in range(len(self.columns)):
                cell = self.cells.get((r, c))
                row.append(None if cell is None else {"value": cell.value, "evidence": cell.evidence})
            grid.append(row)
        return {
            "position": self.position,
            "columns": list(self.columns),
            "rows": list(self.rows),
            "cells": grid,
        }


@dataclass
class ReportSection:
    position: int
    title: str
    tldr: str
    body: str
    format: str
    citations: dict[str, CitationRef]
    table: ComparisonTable | None = None

    def to_json(self) -> dict:
        return {
            "position": self.position,
            "title": self.title,
            "tldr": self.tldr,
            "body": self.body,
            "format": self.format,
            "citations": {m: ref.to_json() for m, ref in sorted(self.citations.items())},
            "table": self.table.to_json() if self.table else None,
        }


@dataclass
class Report:
    query: str
    sections: list[ReportSection]
    diagnostics: Diagnostics

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "sections": [s.to_json() for s in self.sections],
            "diagnostics": self.diagnostics.to_json(),
        }


# ---------------------------------------------------------------------------
# Step 1: quote extraction
# ---------------------------------------------------------------------------

_UNIT_SEPARATOR = "\n\n"


def build_paper_contexts(reranked: RerankedSet, corpus: Corpus) -> list[PaperContext]:
    """Group reranked passages by paper (rank order) behind each abstract."""
    order: list[str] = []
    grouped: dict[str, list] = {}
    for passage, _score in reranked.entries:
        if passage.paper_id not in grouped:
            grouped[passage.paper_id] = []
            order.append(passage.paper_id)
        grouped[passage.paper_id].append(passage)
    contexts = []
    for paper_id in order:
        paper = corpus.get(paper_id)
        title = paper.title if paper else ""
        units: list[tuple[str, int, str, int, int]] = []
        parts: list[str] = []
        offset = 0
        if paper and paper.abstract:
            units.append(("abstract", offset, "abstract", 0, len(paper.abstract)))
            parts.append(paper.abstract)
            offset += len(paper.abstract) + len(_UNIT_SEPARATOR)
        for sp in grouped[paper_id]:
            units.append((sp.passage_id, offset, sp.field_key, sp.char_span[0], len(sp.text)))
            parts.append(sp.text)
            offset += len(sp.text) + len(_UNIT_SEPARATOR)
        contexts.append(
            PaperContext(
                paper_id=paper_id,
                title=title,
                assembled_text=_UNIT_SEPARATOR.join(parts),
                units=tuple(units),
            )
        )
    return contexts


def _find_verbatim(fragment: str, haystack: str) -> tuple[int, int] | None:
    """Whitespace-tolerant exact match; returns the span in ``haystack``."""
    words = fragment.split()
    if not words:
        return None
    pattern = r"\s+".join(re.escape(w) for w in words)
    m = re.search(pattern, haystack)
    return (m.start(), m.end()) if m else None


def _anchors_overlapping(corpus: Corpus, paper_id: str, field_key: str, span: tuple[int, int]):
    paper = corpus.get(paper_id)
    if paper is None:
        return []
    lo, hi = span
    return [a for a in paper.anchors_for(field_key) if a.start < hi and a.end > lo]


def extract_quotes(
    query: str,
    reranked: RerankedSet,
    corpus: Corpus,
    gateway: Gateway,
    diagnostics: Diagnostics | None = None,
) -> list[Quote]:
    """One extraction call per paper; keep only verbatim-verified fragments."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    quotes: list[Quote] = []
    for ctx in build_paper_contexts(reranked, corpus):
        try:
            result = gateway.complete(
                EXTRACT_QUOTES,
                {
                    "query": query,
                    "paper_id": ctx.paper_id,
                    "title": ctx.title,
                    "context": ctx.assembled_text,
                },
            )
        except GatewayError as exc:
            diagnostics.warn(f"quote extraction failed for {ctx.paper_id}: {exc}")
            continue
        response = result.text.strip()
        if not response or response == IRRELEVANT_SENTINEL:
            diagnostics.discarded_papers += 1
            continue
        for fragment in _ELLIPSIS_SPLIT.split(response):
            fragment = fragment.strip()
            if not fragment:
                continue
            span = _find_verbatim(fragment, ctx.assembled_text)
            if span is None:
                diagnostics.dropped_quotes += 1
                diagnostics.warn(
                    f"dropped non-verbatim fragment for {ctx.paper_id}: {fragment[:60]!r}"
                )
                continue
            unit_id, unit_off, field_key, field_off, unit_len = _unit_for(ctx, span[0])
            rel = (span[0] - unit_off, min(span[1] - unit_off, unit_len))
            field_span = (field_off + rel[0], field_off + rel[1])
            cited = tuple(
                dict.fromkeys(
                    a.cited_paper_id
                    for a in _anchors_overlapping(corpus, ctx.paper_id, field_key, field_span)
                )
            )
            quotes.append(
                Quote(
                    quote_id=f"q{len(quotes) + 1}",
                    paper_id=ctx.paper_id,
                    text=ctx.assembled_text[span[0] : span[1]],
                    resolved_unit=unit_id,
                    resolved_span=rel,
                    field_key=field_key,
                    field_span=field_span,
                    embedded_citations=cited,
                )
            )
    return quotes


def _unit_for(ctx: PaperContext, position: int) -> tuple[str, int, str, int, int]:
    """The context unit containing ``position`` (fragments crossing a unit
    boundary resolve to the unit where they start)."""
    current = ctx.units[0]
    for unit in ctx.units:
        if unit[1] <= position:
            current = unit
        else:
            break
    return current


# ---------------------------------------------------------------------------
# Step 2: outline and quote assignment
# ---------------------------------------------------------------------------


def _fallback_outline(quotes: list[Quote], diagnostics: Diagnostics) -> list[OutlineSection]:
    diagnostics.outline_fallback = True
    return [OutlineSection(title="Answer", format=PARAGRAPH, position=0,
                           assigned_quote_ids=[q.quote_id for q in quotes])]


def plan_outline(
    query: str,
    quotes: list[Quote],
    gateway: Gateway,
    diagnostics: Diagnostics | None = None,
) -> list[OutlineSection]:
    """Plan themed sections, then assign quotes; degrade to one section."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    try:
        obj = gateway.complete_json(OUTLINE, {"query": query})
        raw_sections = obj.get("sections") if isinstance(obj, dict) else None
        if not isinstance(raw_sections, list) or not raw_sections:
            raise MalformedOutputError("outline carries no sections")
        sections = []
        for i, rec in enumerate(raw_sections):
            if not isinstance(rec, dict) or not isinstance(rec.get("title"), str):
                raise MalformedOutputError(f"outline section {i} is malformed")
            fmt = rec.get("format")
            sections.append(
                OutlineSection(
                    title=rec["title"],
                    format=fmt if fmt in (PARAGRAPH, BULLETS) else PARAGRAPH,
                    position=i,
                )
            )
    except GatewayError as exc:
        diagnostics.warn(f"outline planning failed ({exc}); using a single-section fallback")
        return _fallback_outline(quotes, diagnostics)

    if not any(w in sections[0].title.lower() for w in _INTRO_WORDS):
        sections.insert(0, OutlineSection(title="Introduction", format=PARAGRAPH, position=0))
        for i, s in enumerate(sections):
            s.position = i

    if quotes:
        try:
            _assign_quotes(query, quotes, sections, gateway, diagnostics)
        except GatewayError as exc:
            diagnostics.warn(f"quote assignment failed ({exc}); using a single-section fallback")
            return _fallback_outline(quotes, diagnostics)
    return sections


def _assign_quotes(
    query: str,
    quotes: list[Quote],
    sections: list[OutlineSection],
    gateway: Gateway,
    diagnostics: Diagnostics,
) -> None:
    sections_text = "\n".join(f"{s.position}. {s.title} ({s.format})" for s in sections)
    quotes_text = "\n".join(f"{q.quote_id} ({q.paper_id}): {q.text}" for q in quotes)
    obj = gateway.complete_json(
        ASSIGN_QUOTES,
        {
            "query": query,
            "sections": sections_text,
            "quotes": quotes_text,
            "quote_ids": ",".join(q.quote_id for q in quotes),
        },
    )
    assignments = obj.get("assignments") if isinstance(obj, dict) else None
    if not isinstance(assignments, dict):
        raise MalformedOutputError("quote assignment carries no assignments object")
    valid = {s.position for s in sections}
    by_position: dict[int, list[str]] = {s.position: [] for s in sections}
    for quote in quotes:
        positions = assignments.get(quote.quote_id, [])
        if not isinstance(positions, list):
            positions = []
        kept = [p for p in positions if isinstance(p, int) and p in valid]
        if not kept:
            diagnostics.unassigned_quotes.append(quote.quote_id)
        for p in kept:
            by_position[p].append(quote.quote_id)
    for s in sections:
        s.assigned_quote_ids = by_position[s.position]


# ---------------------------------------------------------------------------
# Citation following and reference pools
# ---------------------------------------------------------------------------


def follow_citations(
    quotes: list[Quote],
    corpus: Corpus,
    diagnostics: Diagnostics | None = None,
) -> list[tuple[str, str]]:
    """Abstracts of papers cited inside the quotes, deduplicated in order."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    pool: list[tuple[str, str]] = []
    seen: set[str] = set()
    for quote in quotes:
        for cited_id in quote.embedded_citations:
            if cited_id in seen:
                continue
            seen.add(cited_id)
            paper = corpus.get(cited_id)
            if paper is None or not paper.abstract:
                diagnostics.missing_cited += 1
                continue
            pool.append((cited_id, paper.abstract))
    return pool


class MarkerRegistry:
    """Stable report-wide marker ids for followed abstracts."""

    def __init__(self):
        self._by_paper: dict[str, str] = {}

    def marker_for(self, paper_id: str) -> str:
        if paper_id not in self._by_paper:
            self._by_paper[paper_id] = f"A{len(self._by_paper) + 1}"
        return self._by_paper[paper_id]


def build_reference_pool(
    section_quotes: list[Quote],
    followed: list[tuple[str, str]],
    corpus: Corpus,
    registry: MarkerRegistry,
) -> list[CitationRef]:
    refs = []
    for q in section_quotes:
        paper = corpus.get(q.paper_id)
        refs.append(
            CitationRef(
                marker=q.marker,
                kind="quote",
                paper_id=q.paper_id,
                quote_id=q.quote_id,
                text=q.text,
                paper_title=paper.title if paper else "",
            )
        )
    for paper_id, abstract in followed:
        paper = corpus.get(paper_id)
        refs.append(
            CitationRef(
                marker=registry.marker_for(paper_id),
                kind="abstract",
                paper_id=paper_id,
                text=abstract,
                paper_title=paper.title if paper else "",
            )
        )
    return refs


# ---------------------------------------------------------------------------
# Step 3: serial section generation
# ---------------------------------------------------------------------------


def generate_section(
    query: str,
    outline: list[OutlineSection],
    position: int,
    prior_sections: list[ReportSection],
    reference_pool: list[CitationRef],
    gateway: Gateway,
    diagnostics: Diagnostics | None = None,
) -> ReportSection:
    """Write one section, strictly after all earlier ones."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    if len(prior_sections) != position:
        raise ValueError(
            f"section {position} requires exactly {position} prior sections, "
            f"got {len(prior_sections)}"
        )
    plan = outline[position]
    pool = {ref.marker: ref for ref in reference_pool}
    refs_text = "\n".join(
        f"[{ref.marker}] ({ref.paper_id}: {ref.paper_title}) {ref.text}"
        for ref in reference_pool
    ) or "(none)"
    prior_text = "\n\n".join(f"{s.title}\n{s.body}" for s in prior_sections) or "(none)"
    variables = {
        "query": query,
        "title": plan.title,
        "format": plan.format,
        "position": str(position),
        "marker_ids": ",".join(ref.marker for ref in reference_pool),
        "example_marker": reference_pool[0].marker if reference_pool else MEMORY_MARKER,
        "references": refs_text,
        "prior_sections": prior_text,
    }
    try:
        obj = gateway.complete_json(SECTION, variables)
        if not isinstance(obj, dict) or not isinstance(obj.get("body"), str):
            raise MalformedOutputError("section response carries no body")
        body = obj["body"]
        tldr = obj.get("tldr") if isinstance(obj.get("tldr"), str) else ""
    except GatewayError as exc:
        diagnostics.warn(f"section {position} generation failed: {exc}")
        return ReportSection(
            position=position,
            title=plan.title,
            tldr="",
            body="(section generation failed)",
            format=plan.format,
            citations={},
        )
    body, citations = _resolve_markers(body, pool, diagnostics)
    return ReportSection(
        position=position,
        title=plan.title,
        tldr=tldr,
        body=body,
        format=plan.format,
        citations=citations,
    )


def _resolve_markers(
    body: str, pool: dict[str, CitationRef], diagnostics: Diagnostics
) -> tuple[str, dict[str, CitationRef]]:
    """Validate bracketed markers; unknown ids become model-memory cites."""
    citations: dict[str, CitationRef] = {}

    def handle(match: re.Match) -> str:
        tokens = [t.strip() for t in match.group(1).split(",")]
        out: list[str] = []
        for token in tokens:
            if not token:
                continue
            if token in pool:
                citations[token] = pool[token]
                out.append(token)
                continue
            if token != MEMORY_MARKER:
                diagnostics.warn(f"unknown citation marker {token!r} rewritten to memory")
            diagnostics.memory_citations += 1
            citations[MEMORY_MARKER] = CitationRef(marker=MEMORY_MARKER, kind="memory")
            if MEMORY_MARKER not in out:
                out.append(MEMORY_MARKER)
        return "[" + ", ".join(out) + "]" if out else ""

    return _MARKER_GROUP.sub(handle, body), citations


# ---------------------------------------------------------------------------
# Comparison tables
# ---------------------------------------------------------------------------


def cited_corpus_papers(section: ReportSection, corpus: Corpus) -> list[str]:
    """Distinct corpus papers cited in a section, in marker order of first use."""
    seen: list[str] = []
    for match in _MARKER_GROUP.finditer(section.body):
        for token in (t.strip() for t in match.group(1).split(",")):
            ref = section.citations.get(token)
            if ref is None or ref.kind == "memory" or ref.paper_id is None:
                continue
            if ref.paper_id not in seen and ref.paper_id in corpus:
                seen.append(ref.paper_id)
    return seen


def generate_table(
    query: str,
    section: ReportSection,
    cited_papers: list[str],
    corpus: Corpus,
    gateway: Gateway,
    diagnostics: Diagnostics | None = None,
    tau: float = 0.5,
    cell_context_chars: int = 6000,
) -> ComparisonTable | None:
    """Compare the section's cited papers on model-proposed aspects."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    if section.format != BULLETS or len(cited_papers) < 2:
        return None
    abstracts_text = "\n\n".join(
        f"{pid}: {corpus.get(pid).abstract}" for pid in cited_papers if corpus.get(pid)
    )
    try:
        obj = gateway.complete_json(
            TABLE_ASPECTS,
            {"query": query, "section_title": section.title, "abstracts": abstracts_text},
        )
        aspects = [a for a in (obj.get("aspects") or []) if isinstance(a, str)] if isinstance(obj, dict) else []
    except GatewayError as exc:
        diagnostics.warn(f"table aspects failed for section {section.position}: {exc}")
        return None
    if not aspects:
        return None
    table = ComparisonTable(
        position=section.position, columns=aspects, rows=list(cited_papers), cells={}
    )
    for r, paper_id in enumerate(cited_papers):
        paper = corpus.get(paper_id)
        paper_text = paper.full_text(max_chars=cell_context_chars) if paper else ""
        for c, aspect in enumerate(aspects):
            table.cells[(r, c)] = _fill_cell(query, aspect, paper_id, paper_text, gateway)
    filtered = filter_table(table, tau=tau)
    if not filtered.rows or not filtered.columns:
        return None
    return filtered


def _fill_cell(
    query: str, aspect: str, paper_id: str, paper_text: str, gateway: Gateway
) -> Cell | None:
    try:
        obj = gateway.complete_json(
            TABLE_VALUE,
            {"query": query, "aspect": aspect, "paper_id": paper_id, "paper_text": paper_text},
        )
    except GatewayError:
        return None
    if not isinstance(obj, dict):
        return None
    value = obj.get("value")
    if not isinstance(value, str) or not value or value == MISSING:
        return None
    evidence = obj.get("evidence")
    return Cell(value=value, evidence=evidence if isinstance(evidence, str) else None)


def filter_table(table: ComparisonTable, tau: float = 0.5) -> ComparisonTable:
    """Drop the sparsest columns, then rows, above ``tau``, to a fixpoint.

    Ties drop the higher index. Deterministic by construction.
    """
    cols = list(range(len(table.columns)))
    rows = list(range(len(table.rows)))

    def col_frac(c: int) -> float:
        live = [r for r in rows]
        if not live:
            return 1.0
        return sum(1 for r in live if table.cells.get((r, c)) is None) / len(live)

    def row_frac(r: int) -> float:
        live = [c for c in cols]
        if not live:
            return 1.0
        return sum(1 for c in live if table.cells.get((r, c)) is None) / len(live)

    changed = True
    while changed and cols and rows:
        changed = False
        while cols:
            worst = max(cols, key=lambda c: (col_frac(c), c))
            if col_frac(worst) > tau:
                cols.remove(worst)
                changed = True
            else:
                break
        while rows and cols:
            worst = max(rows, key=lambda r: (row_frac(r), r))
            if row_frac(worst) > tau:
                rows.remove(worst)
                changed = True
            else:
                break
    if not cols or not rows:
        cols, rows = [], []
    remap_cells = {}
    for new_r, r in enumerate(rows):
        for new_c, c in enumerate(cols):
            remap_cells[(new_r, new_c)] = table.cells.get((r, c))
    return ComparisonTable(
        position=table.position,
        columns=[table.columns[c] for c in cols],
        rows=[table.rows[r] for r in rows],
        cells=remap_cells,
    )


def verify_quote(quote: Quote, assembled_text: str) -> bool:
    """Whitespace-normalized substring check (the verbatimness invariant)."""
    return normalize_ws(quote.text) in normalize_ws(assembled_text)
