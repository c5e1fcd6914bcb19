"""Corpus data model, line-delimited ingestion, and the passage chunker.

A corpus file holds one JSON object per line (UTF-8):

    {"paper_id": "P1", "title": "...", "abstract": "...", "venue": "ACL",
     "year": 2021, "fields_of_study": ["Computer Science"],
     "body_sections": [{"title": "Introduction", "text": "..."}],
     "citations": [{"field": "abstract", "start": 10, "end": 42,
                    "cited_paper_id": "P7"}]}

Citation anchors name the field they point into: ``"title"``, ``"abstract"``,
or ``"body:<i>"`` for the i-th body section.

Chunking turns each field independently into passages of at most
``max_tokens`` tokens, split at sentence boundaries where a sentence fits
and at token boundaries otherwise. Every passage after the first starts
with the previous passage's final sentence, truncated to its trailing
``max_overlap`` tokens. Stripping those overlap prefixes and concatenating
passage texts reproduces the field text byte-for-byte.
"""

from __future__ import annotations

import json
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

from .tokenizer import DefaultTokenizer, Span, Tokenizer

TITLE_FIELD = "title"
ABSTRACT_FIELD = "abstract"
BODY_FIELD_PREFIX = "body:"

PassageKind = str  # "title" | "abstract" | "body"


class CorpusError(Exception):
    """Raised for unrecoverable corpus problems (e.g. duplicate ids)."""


class DuplicatePaperIdError(CorpusError):
    def __init__(self, paper_id: str, line: int):
        super().__init__(f"duplicate paper_id {paper_id!r} at line {line}")
        self.paper_id = paper_id
        self.line = line


@dataclass(frozen=True)
class CitationAnchor:
    """A span inside a named paper field that cites another paper."""

    field: str
    start: int
    end: int
    cited_paper_id: str


@dataclass(frozen=True)
class BodySection:
    title: str
    text: str


@dataclass(frozen=True)
class Paper:
    paper_id: str
    title: str = ""
    abstract: str = ""
    venue: str | None = None
    year: int | None = None
    fields_of_study: frozenset[str] = frozenset()
    body_sections: tuple[BodySection, ...] = ()
    citations: tuple[CitationAnchor, ...] = ()

    def field_text(self, field_key: str) -> str:
        """Text of a named field; raises ``KeyError`` for unknown keys."""
        if field_key == TITLE_FIELD:
            return self.title
        if field_key == ABSTRACT_FIELD:
            return self.abstract
        if field_key.startswith(BODY_FIELD_PREFIX):
            idx = int(field_key[len(BODY_FIELD_PREFIX) :])
            if 0 <= idx < len(self.body_sections):
                return self.body_sections[idx].text
        raise KeyError(field_key)

    def anchors_for(self, field_key: str) -> list[CitationAnchor]:
        return [a for a in self.citations if a.field == field_key]

    def full_text(self, max_chars: int | None = None) -> str:
        """Abstract followed by the body sections, truncated to a budget.

        Abstract-first ordering means truncation drops body tail text, never
        the abstract.
        """
        parts = [self.abstract]
        parts.extend(s.text for s in self.body_sections)
        text = "\n\n".join(p for p in parts if p)
        if max_chars is not None and len(text) > max_chars:
            text = text[:max_chars]
        return text


@dataclass(frozen=True)
class Passage:
    """A retrieval unit: a chunk of one field of one paper."""

    passage_id: str
    paper_id: str
    kind: PassageKind
    field_key: str
    section_path: str
    text: str
    token_count: int
    char_span: tuple[int, int]
    overlap_prefix_tokens: int = 0
    degenerate: bool = False


@dataclass
class IngestReport:
    loaded: int = 0
    skipped: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    def add_error(self, line: int, message: str) -> None:
        self.errors.append((line, message))
        self.skipped += 1


class Corpus:
    """An in-memory paper collection keyed by paper_id."""

    def __init__(self, papers: Iterable[Paper] = ()):
        self._papers: dict[str, Paper] = {}
        self.ingest_report = IngestReport()
        for p in papers:
            self.add(p)

    def add(self, paper: Paper, line: int = 0) -> None:
        if paper.paper_id in self._papers:
            raise DuplicatePaperIdError(paper.paper_id, line)
        self._papers[paper.paper_id] = paper

    def get(self, paper_id: str) -> Paper | None:
        return self._papers.get(paper_id)

    def __contains__(self, paper_id: str) -> bool:
        return paper_id in self._papers

    def __len__(self) -> int:
        return len(self._papers)

    def __iter__(self) -> Iterator[Paper]:
        return iter(self._papers.values())

    @property
    def paper_ids(self) -> list[str]:
        return list(self._papers)


def paper_to_record(paper: Paper) -> dict:
    """JSON-serializable record in the corpus file schema."""
    return {
        "paper_id": paper.paper_id,
        "title": paper.title,
        "abstract": paper.abstract,
        "venue": paper.venue,
        "year": paper.year,
        "fields_of_study": sorted(paper.fields_of_study),
        "body_sections": [{"title": s.title, "text": s.text} for s in paper.body_sections],
        "citations": [
            {"field": a.field, "start": a.start, "end": a.end, "cited_paper_id": a.cited_paper_id}
            for a in paper.citations
        ],
    }


def _parse_record(obj: dict) -> Paper:
    paper_id = obj.get("paper_id")
    if not isinstance(paper_id, str) or not paper_id:
        raise ValueError("missing or empty paper_id")
    title = obj.get("title") or ""
    abstract = obj.get("abstract") or ""
    if not isinstance(title, str) or not isinstance(abstract, str):
        raise ValueError("title and abstract must be strings")
    raw_sections = obj.get("body_sections") or []
    if not isinstance(raw_sections, list):
        raise ValueError("body_sections must be a list")
    sections = []
    for i, sec in enumerate(raw_sections):
        if not isinstance(sec, dict) or not isinstance(sec.get("text"), str):
            raise ValueError(f"body_sections[{i}] must have string text")
        sections.append(BodySection(title=str(sec.get("title") or ""), text=sec["text"]))
    if not abstract and not sections:
        raise ValueError("record needs an abstract or body_sections")
    venue = obj.get("venue")
    if venue is not None and not isinstance(venue, str):
        raise ValueError("venue must be a string")
    year = obj.get("year")
    if year is not None and not isinstance(year, int):
        raise ValueError("year must be an integer")
    fos = obj.get("fields_of_study") or []
    if not isinstance(fos, list) or not all(isinstance(f, str) for f in fos):
        raise ValueError("fields_of_study must be a list of strings")
    paper = Paper(
        paper_id=paper_id,
        title=title,
        abstract=abstract,
        venue=venue,
        year=year,
        fields_of_study=frozenset(fos),
        body_sections=tuple(sections),
    )
    anchors = []
    for j, cit in enumerate(obj.get("citations") or []):
        if not isinstance(cit, dict):
            raise ValueError(f"citations[{j}] must be an object")
        fld = cit.get("field")
        start, end = cit.get("start"), cit.get("end")
        cited = cit.get("cited_paper_id")
        if not isinstance(fld, str) or not isinstance(cited, str) or not cited:
            raise ValueError(f"citations[{j}] missing field or cited_paper_id")
        if not isinstance(start, int) or not isinstance(end, int):
            raise ValueError(f"citations[{j}] span must be integers")
        try:
            text = paper.field_text(fld)
        except KeyError:
            raise ValueError(f"citations[{j}] names unknown field {fld!r}")
        if not (0 <= start < end <= len(text)):
            raise ValueError(f"citations[{j}] span ({start}, {end}) outside field {fld!r}")
        anchors.append(CitationAnchor(field=fld, start=start, end=end, cited_paper_id=cited))
    if anchors:
        paper = Paper(**{**paper.__dict__, "citations": tuple(anchors)})
    return paper


def ingest_corpus(source: IO[str] | Iterable[str]) -> Corpus:
    """Read a line-delimited corpus stream into a validated ``Corpus``.

    Malformed records are skipped and reported with their 1-based line
    number in ``corpus.ingest_report``. A duplicate paper_id is a hard
    error: the whole ingest aborts.
    """
    corpus = Corpus()
    report = corpus.ingest_report
    for line_no, line in enumerate(source, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as exc:
            report.add_error(line_no, f"invalid JSON: {exc.msg}")
            continue
        if not isinstance(obj, dict):
            report.add_error(line_no, "record is not a JSON object")
            continue
        try:
            paper = _parse_record(obj)
        except ValueError as exc:
            report.add_error(line_no, str(exc))
            continue
        corpus.add(paper, line=line_no)
        report.loaded += 1
    return corpus


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

DEFAULT_MAX_TOKENS = 480
DEFAULT_MAX_OVERLAP = 64


def chunk_paper(
    paper: Paper,
    tokenizer: Tokenizer | None = None,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    max_overlap: int = DEFAULT_MAX_OVERLAP,
) -> list[Passage]:
    """Chunk a paper's title, abstract, and body sections independently."""
    if max_tokens < 0 or max_overlap < 0:
        raise ValueError("max_tokens and max_overlap must be non-negative")
    tokenizer = tokenizer or DefaultTokenizer()
    passages: list[Passage] = []
    fields: list[tuple[str, PassageKind, str, str]] = []
    if paper.title:
        fields.append((TITLE_FIELD, "title", "title", paper.title))
    if paper.abstract:
        fields.append((ABSTRACT_FIELD, "abstract", "abstract", paper.abstract))
    for i, sec in enumerate(paper.body_sections):
        key = f"{BODY_FIELD_PREFIX}{i}"
        fields.append((key, "body", sec.title or key, sec.text))
    for field_key, kind, section_path, text in fields:
        for seq, (span, core_start, degenerate) in enumerate(
            _chunk_field(text, tokenizer, max_tokens, max_overlap)
        ):
            chunk_text = text[span.start : span.end]
            token_count = len(tokenizer.tokenize(chunk_text))
            overlap_tokens = len(tokenizer.tokenize(text[span.start : core_start]))
            passages.append(
                Passage(
                    passage_id=f"{paper.paper_id}::{field_key}::{seq:04d}",
                    paper_id=paper.paper_id,
                    kind=kind,
                    field_key=field_key,
                    section_path=section_path,
                    text=chunk_text,
                    token_count=token_count,
                    char_span=(span.start, span.end),
                    overlap_prefix_tokens=overlap_tokens,
                    degenerate=degenerate,
                )
            )
    return passages


def _chunk_field(
    text: str, tokenizer: Tokenizer, max_tokens: int, max_overlap: int
) -> list[tuple[Span, int, bool]]:
    """Yield ``(span, core_start, degenerate)`` per passage of one field.

    ``span`` covers overlap prefix plus core; the cores ``[core_start,
    span.end)`` tile the text exactly, which is what makes reconstruction
    byte-exact. All boundaries sit at token starts (or text ends), so no
    token is ever cut in half.
    """
    if not text:
        return []
    tokens = tokenizer.tokenize(text)
    token_starts = [t.start for t in tokens]
    sents = tokenizer.sentences(text)
    sent_starts = [s.start for s in sents]

    def tokens_in(lo: int, hi: int) -> int:
        return bisect_left(token_starts, hi) - bisect_left(token_starts, lo)

    out: list[tuple[Span, int, bool]] = []
    overlap_cap = min(max_overlap, max_tokens - 1)
    core_start = 0
    overlap_start = 0
    si = 0
    while core_start < len(text):
        budget = max_tokens - tokens_in(overlap_start, core_start)
        while si < len(sents) and sents[si].end <= core_start:
            si += 1
        core_end = core_start
        degenerate = False
        j = si
        while j < len(sents) and tokens_in(core_start, sents[j].end) <= budget:
            core_end = sents[j].end
            j += 1
        if core_end == core_start:
            # The next (piece of a) sentence does not fit whole: cut at a
            # token boundary, or emit a lone degenerate token if even one
            # token exceeds the limit.
            k = bisect_left(token_starts, core_start)
            take = max(budget, 1)
            if budget < 1:
                degenerate = True
            last = min(k + take - 1, len(tokens) - 1)
            if last + 1 < len(tokens):
                core_end = token_starts[last + 1]
            else:
                core_end = len(text)
        out.append((Span(overlap_start, core_end), core_start, degenerate))
        if core_end >= len(text):
            break
        # Next overlap prefix: the closing sentence of the passage just
        # emitted (clamped to its core, so a mid-sentence start never drags
        # in earlier text), trimmed to its trailing overlap_cap tokens.
        if overlap_cap <= 0:
            overlap_start = core_end
        else:
            idx = bisect_right(sent_starts, core_end - 1) - 1
            overlap_start = max(sents[idx].start, core_start)
            if tokens_in(overlap_start, core_end) > overlap_cap:
                hi = bisect_left(token_starts, core_end)
                overlap_start = token_starts[hi - overlap_cap]
        core_start = core_end
    return out
