"""Span-preserving tokenization and rule-based sentence splitting.

Both functions return character spans into the original text, never copies
that could drift from it. The chunker relies on two guarantees:

  * tokens are ordered, non-overlapping, and never contain whitespace;
  * sentence spans are contiguous and cover the whole text (each sentence
    span absorbs its trailing whitespace), so any concatenation of spans
    reproduces the text byte-for-byte.

The default tokenizer splits on whitespace and punctuation classes. It is
deliberately model-free: chunk boundaries must be reproducible offline. A
model tokenizer can be substituted anywhere a ``Tokenizer`` is accepted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Protocol

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

# Sentence boundary: terminal punctuation, optional closing quotes/brackets,
# then whitespace. The next sentence starts at the first non-space character.
_BOUNDARY_RE = re.compile(r"[.!?]['\"’”)\]]*\s+")

# Trailing words that end with a period but do not end a sentence.
_ABBREVIATIONS = frozenset(
    {
        "al",
        "approx",
        "cf",
        "dr",
        "e.g",
        "eq",
        "et al",
        "etc",
        "fig",
        "i.e",
        "mr",
        "mrs",
        "ms",
        "no",
        "prof",
        "sec",
        "st",
        "vs",
    }
)


@dataclass(frozen=True)
class Span:
    """Half-open character range ``[start, end)`` into a source text."""

    start: int
    end: int

    def slice(self, text: str) -> str:
        return text[self.start : self.end]


class Tokenizer(Protocol):
    """Pure, deterministic text analysis used by chunking and BM25."""

    def tokenize(self, text: str) -> list[Span]: ...

    def sentences(self, text: str) -> list[Span]: ...


class DefaultTokenizer:
    """Whitespace/punctuation tokenizer with a rule-based sentence splitter."""

    def tokenize(self, text: str) -> list[Span]:
        return [Span(m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]

    def sentences(self, text: str) -> list[Span]:
        """Contiguous sentence spans covering ``text`` exactly.

        A boundary is placed after terminal punctuation followed by
        whitespace, unless the punctuation belongs to a known abbreviation.
        The whitespace is attached to the preceding sentence so the spans
        tile the text.
        """
        if not text:
            return []
        boundaries: list[int] = []
        for m in _BOUNDARY_RE.finditer(text):
            if m.end() >= len(text):
                break
            if _is_abbreviation(text, m.start()):
                continue
            boundaries.append(m.end())
        spans = []
        prev = 0
        for b in boundaries:
            spans.append(Span(prev, b))
            prev = b
        spans.append(Span(prev, len(text)))
        return spans


def _is_abbreviation(text: str, punct_pos: int) -> bool:
    if text[punct_pos] != ".":
        return False
    # Word immediately before the period, including internal periods ("e.g").
    i = punct_pos
    while i > 0 and (text[i - 1].isalnum() or text[i - 1] == "."):
        i -= 1
    word = text[i:punct_pos].lower().rstrip(".")
    if word in _ABBREVIATIONS:
        return True
    # "et al." needs the preceding word too.
    if word == "al" and text[:i].rstrip().lower().endswith("et"):
        return True
    # Single letters read as initials ("J. Smith").
    return len(word) == 1 and word.isalpha()


def count_tokens(tokenizer: Tokenizer, text: str) -> int:
    return len(tokenizer.tokenize(text))


def normalize_ws(text: str) -> str:
    """Collapse whitespace runs to single spaces and trim."""
    return " ".join(text.split())
