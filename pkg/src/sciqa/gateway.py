"""Chat-completion gateway: prompt templates, providers, and moderation.

Every model call in the pipeline flows through this module; no other
module holds a provider. Two offline providers ship with the package:

  * ``ScriptedProvider`` replays canned responses matched on template id
    and a digest of the bound variables; an unmatched request is a hard
    error so tests stay exhaustive.
  * ``HeuristicProvider`` computes plausible deterministic outputs from
    the request variables themselves, which keeps the demo CLI and the
    web UI usable on any corpus with no keys or weights.

Structured steps ask for a single JSON object; quote extraction returns
plain text with fragments separated by ellipses. Malformed structured
output is retried once with the identical prompt, then surfaces as a
typed error for the caller's degradation path.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from string import Formatter
from typing import Mapping, Protocol, Sequence

from .tokenizer import DefaultTokenizer

# Template ids; one per generation step.
DECOMPOSE = "decompose"
EXTRACT_QUOTES = "extract_quotes"
OUTLINE = "outline"
ASSIGN_QUOTES = "assign_quotes"
SECTION = "section"
TABLE_ASPECTS = "table_aspects"
TABLE_VALUE = "table_value"
RELEVANCE_LABEL = "relevance_label"
ATTRIBUTION_JUDGE = "attribution_judge"

TEMPLATE_IDS = (
    DECOMPOSE,
    EXTRACT_QUOTES,
    OUTLINE,
    ASSIGN_QUOTES,
    SECTION,
    TABLE_ASPECTS,
    TABLE_VALUE,
    RELEVANCE_LABEL,
    ATTRIBUTION_JUDGE,
)


class GatewayError(Exception):
    pass


class RenderError(GatewayError):
    """A template placeholder was left unbound."""


class RetriableProviderError(GatewayError):
    """Transient provider failure (timeout, refusal); safe to retry."""


class ProviderHardError(GatewayError):
    """Permanent provider failure; retrying is pointless."""


class UnmatchedScriptError(ProviderHardError):
    """A scripted provider got a request its script does not cover."""


class MalformedOutputError(GatewayError):
    """Structured output stayed unparseable after the retry."""


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str
    output_schema: str  # "json" | "text"

    def placeholders(self) -> set[str]:
        return {name for _, name, _, _ in Formatter().parse(self.text) if name}

    def render(self, variables: Mapping[str, str]) -> str:
        missing = self.placeholders() - set(variables)
        if missing:
            raise RenderError(
                f"template {self.template_id!r} is missing placeholder(s): "
                + ", ".join(sorted(missing))
            )
        return self.text.format(**{k: str(v) for k, v in variables.items()})


DEFAULT_TEMPLATES: dict[str, PromptTemplate] = {
    DECOMPOSE: PromptTemplate(
        DECOMPOSE,
        "Rewrite the research question below for two search backends and pull out any "
        "requested metadata constraints.\n"
        "Return one JSON object with keys: keyword (short keyword query), semantic "
        "(a natural-language paraphrase), and optionally year_min, year_max, venues "
        "(list), fields_of_study (list). Omit constraint keys the user did not ask for.\n\n"
        "Question: {query}",
        "json",
    ),
    EXTRACT_QUOTES: PromptTemplate(
        EXTRACT_QUOTES,
        "Copy, word for word, the spans of the paper content below that directly help "
        "answer the question. Separate the spans with \" ... \". Do not paraphrase. "
        "If nothing in the content is relevant, reply with exactly NONE.\n\n"
        "Question: {query}\n\nPaper {paper_id}: {title}\n\nContent:\n{context}",
        "text",
    ),
    OUTLINE: PromptTemplate(
        OUTLINE,
        "Plan a multi-section report that answers the question below. List the section "
        "themes in logical reading order; the first section must be an introduction or "
        "background. For each section choose a format: \"paragraph\" for a nuanced "
        "synthesis, \"bullets\" for enumerating closely related work.\n"
        "Return one JSON object: {{\"sections\": [{{\"title\": ..., \"format\": ...}}]}}.\n\n"
        "Question: {query}",
        "json",
    ),
    ASSIGN_QUOTES: PromptTemplate(
        ASSIGN_QUOTES,
        "Assign each evidence quote to the report sections where it belongs. A quote may "
        "support zero or more sections.\n"
        "Return one JSON object: {{\"assignments\": {{\"<quote_id>\": [section positions]}}}}.\n\n"
        "Question: {query}\n\nSections:\n{sections}\n\nQuotes:\n{quotes}",
        "json",
    ),
    SECTION: PromptTemplate(
        SECTION,
        "Write section {position} of a report answering the question below. Ground every "
        "claim in the references, citing them inline with their bracketed ids (e.g. "
        "[{example_marker}]). If you must rely on your own knowledge, cite [M]. Match the "
        "requested format and stay consistent with the earlier sections.\n"
        "Return one JSON object: {{\"tldr\": one-line summary, \"body\": section text}}.\n\n"
        "Question: {query}\nSection title: {title}\nFormat: {format}\n"
        "Available reference ids: {marker_ids}\n\nReferences:\n{references}\n\n"
        "Earlier sections:\n{prior_sections}",
        "json",
    ),
    TABLE_ASPECTS: PromptTemplate(
        TABLE_ASPECTS,
        "Propose a short list of aspects on which the papers below can be compared in a "
        "table, given the question and section topic.\n"
        "Return one JSON object: {{\"aspects\": [aspect names]}}.\n\n"
        "Question: {query}\nSection: {section_title}\n\nPaper abstracts:\n{abstracts}",
        "json",
    ),
    TABLE_VALUE: PromptTemplate(
        TABLE_VALUE,
        "Using only the paper text below, give the paper's value for the aspect "
        "\"{aspect}\", plus a short supporting excerpt copied from the text. If the "
        "aspect does not apply, answer MISSING.\n"
        "Return one JSON object: {{\"value\": ..., \"evidence\": ...}} or "
        "{{\"value\": \"MISSING\"}}.\n\n"
        "Question: {query}\nPaper {paper_id}:\n{paper_text}",
        "json",
    ),
    RELEVANCE_LABEL: PromptTemplate(
        RELEVANCE_LABEL,
        "If any part of the following text is relevant to the following question, then "
        "return 1, otherwise return 0. Non-english results are not relevant, results "
        "which are primarily tables are not relevant.\n\n"
        "Question: {question}\n\nText: {text}",
        "text",
    ),
    ATTRIBUTION_JUDGE: PromptTemplate(
        ATTRIBUTION_JUDGE,
        "As an Attribution Validator, your task is to verify whether a given reference "
        "can support the given claim. A claim can be either a plain sentence or a "
        "question followed by its answer. Specifically, your response should clearly "
        "indicate the relationship: Attributable, Contradictory or Extrapolatory. A "
        "contradictory error occurs when you can infer that the answer contradicts the "
        "fact presented in the context, while an extrapolatory error means that you "
        "cannot infer the correctness of the answer based on the information provided "
        "in the context. Output your response as a json with only a single key "
        "\"output\" and a value of one among - (\"Attributable\", \"Contradictory\", "
        "\"Extrapolatory\").\n"
        "Claim: {claim}\n"
        "Reference: {ref_excerpt}",
        "json",
    ),
}


@dataclass(frozen=True)
class CompletionRequest:
    template_id: str
    variables: Mapping[str, str]
    max_tokens: int = 2048
    temperature: float = 0.0


@dataclass(frozen=True)
class CompletionResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    provider_id: str
    latency_s: float


class ChatProvider(Protocol):
    provider_id: str

    def complete(self, request: CompletionRequest, prompt: str) -> str: ...


def variables_digest(variables: Mapping[str, str]) -> str:
    """Stable 16-hex digest of a variable binding, for script matching."""
    blob = json.dumps({k: str(v) for k, v in variables.items()}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class ScriptEntry:
    """One scripted response (or injected failure).

    Matches when the template id agrees, the digest agrees (or is "*"),
    and every ``where`` value appears as a substring of the corresponding
    request variable.
    """

    template_id: str
    response: str = ""
    digest: str = "*"
    where: Mapping[str, str] | None = None
    fail: str | None = None  # None | "retriable" | "hard"
    max_uses: int | None = None
    uses: int = 0

    def matches(self, request: CompletionRequest) -> bool:
        if self.template_id != request.template_id:
            return False
        if self.max_uses is not None and self.uses >= self.max_uses:
            return False
        if self.digest != "*" and self.digest != variables_digest(request.variables):
            return False
        if self.where:
            for key, needle in self.where.items():
                if needle not in str(request.variables.get(key, "")):
                    return False
        return True


class ScriptedProvider:
    """Deterministic mock: first matching entry wins, unmatched is fatal."""

    provider_id = "scripted"

    def __init__(self, script: Sequence[ScriptEntry]):
        self.script = list(script)

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "ScriptedProvider":
        entries = [
            ScriptEntry(
                template_id=r["template_id"],
                response=r.get("response", ""),
                digest=r.get("variables_digest", r.get("digest", "*")),
                where=r.get("where"),
                fail=r.get("fail"),
                max_uses=r.get("max_uses"),
            )
            for r in records
        ]
        return cls(entries)

    def complete(self, request: CompletionRequest, prompt: str) -> str:
        for entry in self.script:
            if entry.matches(request):
                entry.uses += 1
                if entry.fail == "retriable":
                    raise RetriableProviderError(
                        f"scripted retriable failure for {request.template_id}"
                    )
                if entry.fail == "hard":
                    raise ProviderHardError(f"scripted hard failure for {request.template_id}")
                return entry.response
        raise UnmatchedScriptError(
            f"no script entry for template {request.template_id!r} "
            f"with digest {variables_digest(request.variables)}"
        )


class HeuristicProvider:
    """Keyless stand-in model: answers derived from the request variables.

    Good enough to drive the full pipeline end to end (demo mode); not a
    substitute for scripted fixtures in tests that pin exact outputs.
    """

    provider_id = "heuristic"

    def __init__(self):
        self._tokenizer = DefaultTokenizer()

    def complete(self, request: CompletionRequest, prompt: str) -> str:
        tid = request.template_id
        v = request.variables
        if tid == DECOMPOSE:
            return json.dumps({"keyword": str(v["query"]), "semantic": str(v["query"])})
        if tid == EXTRACT_QUOTES:
            return self._quotes(str(v["context"]))
        if tid == OUTLINE:
            return json.dumps(
                {
                    "sections": [
                        {"title": "Background", "format": "paragraph"},
                        {"title": "Findings from the literature", "format": "bullets"},
                    ]
                }
            )
        if tid == ASSIGN_QUOTES:
            quote_ids = [q for q in str(v.get("quote_ids", "")).split(",") if q]
            return json.dumps({"assignments": {qid: [1] for qid in quote_ids}})
        if tid == SECTION:
            markers = [m for m in str(v.get("marker_ids", "")).split(",") if m]
            title = str(v.get("title", "Section"))
            if markers:
                lines = [f"- The retrieved evidence bears on this question [{m}]." for m in markers]
                body = (
                    "\n".join(lines)
                    if str(v.get("format")) == "bullets"
                    else " ".join(lines).replace("- ", "")
                )
            else:
                body = "No retrieved evidence was available, so this rests on model knowledge [M]."
            return json.dumps({"tldr": f"{title}: summary of the available evidence.", "body": body})
        if tid == TABLE_ASPECTS:
            return json.dumps({"aspects": ["Approach", "Evaluation"]})
        if tid == TABLE_VALUE:
            text = str(v.get("paper_text", ""))
            sents = self._tokenizer.sentences(text)
            if not sents:
                return json.dumps({"value": "MISSING"})
            first = " ".join(text[sents[0].start : sents[0].end].split())
            return json.dumps({"value": first[:80], "evidence": first})
        if tid == RELEVANCE_LABEL:
            q = str(v.get("question", "")).lower().split()
            return "1" if any(w in str(v.get("text", "")).lower() for w in q) else "0"
        if tid == ATTRIBUTION_JUDGE:
            claim_words = set(str(v.get("claim", "")).lower().split())
            ref_words = set(str(v.get("ref_excerpt", "")).lower().split())
            overlap = len(claim_words & ref_words) / max(len(claim_words), 1)
            return json.dumps({"output": "Attributable" if overlap >= 0.3 else "Extrapolatory"})
        raise ProviderHardError(f"heuristic provider has no rule for template {tid!r}")

    def _quotes(self, context: str) -> str:
        sents = self._tokenizer.sentences(context)
        picks = []
        for span in sents[:2]:
            frag = context[span.start : span.end].strip()
            if frag:
                picks.append(frag)
        return " ... ".join(picks) if picks else "NONE"


def complete(
    request: CompletionRequest,
    provider: ChatProvider,
    templates: Mapping[str, PromptTemplate] | None = None,
    retries: int = 1,
) -> CompletionResult:
    """Render and execute one completion, retrying transient failures."""
    templates = templates or DEFAULT_TEMPLATES
    template = templates.get(request.template_id)
    if template is None:
        raise RenderError(f"unknown template id {request.template_id!r}")
    prompt = template.render(request.variables)
    attempts = retries + 1
    last_exc: Exception | None = None
    for _ in range(attempts):
        start = time.perf_counter()
        try:
            text = provider.complete(request, prompt)
        except RetriableProviderError as exc:
            last_exc = exc
            continue
        return CompletionResult(
            text=text,
            prompt_tokens=len(prompt.split()),
            completion_tokens=len(text.split()),
            provider_id=provider.provider_id,
            latency_s=time.perf_counter() - start,
        )
    raise RetriableProviderError(f"provider failed after {attempts} attempts: {last_exc}")


def parse_json_response(text: str):
    """Extract the JSON object/array from a completion, tolerating fences."""
    stripped = text.strip()
    if stripped.startswith("```"):
        stripped = stripped.strip("`")
        if stripped.startswith("json"):
            stripped = stripped[4:]
        stripped = stripped.strip()
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    for open_c, close_c in (("{", "}"), ("[", "]")):
        lo, hi = stripped.find(open_c), stripped.rfind(close_c)
        if 0 <= lo < hi:
            try:
                return json.loads(stripped[lo : hi + 1])
            except json.JSONDecodeError:
                continue
    raise ValueError("response carries no parseable JSON")


def throttle_delay(last_call: float, now: float, min_interval: float) -> float:
    """Seconds to wait before the next request may go out."""
    return max(0.0, last_call + min_interval - now)


class Gateway:
    """Provider plus decoding defaults, bound once and shared read-only.

    ``rate_limit_per_s`` throttles outbound requests across all concurrent
    pipelines sharing this gateway; unset means no limiting (the offline
    providers need none).
    """

    def __init__(
        self,
        provider: ChatProvider,
        templates: Mapping[str, PromptTemplate] | None = None,
        retries: int = 1,
        max_tokens: int = 2048,
        temperature: float = 0.0,
        rate_limit_per_s: float | None = None,
    ):
        self.provider = provider
        self.templates = dict(templates or DEFAULT_TEMPLATES)
        self.retries = retries
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.rate_limit_per_s = rate_limit_per_s
        self.calls: list[CompletionResult] = []
        self._rate_lock = threading.Lock()
        self._last_call = float("-inf")

    def _throttle(self) -> None:
        if not self.rate_limit_per_s or self.rate_limit_per_s <= 0:
            return
        min_interval = 1.0 / self.rate_limit_per_s
        with self._rate_lock:
            delay = throttle_delay(self._last_call, time.monotonic(), min_interval)
            if delay > 0:
                time.sleep(delay)
            self._last_call = time.monotonic()

    def complete(self, template_id: str, variables: Mapping[str, str]) -> CompletionResult:
        request = CompletionRequest(
            template_id=template_id,
            variables=variables,
            max_tokens=self.max_tokens,
            temperature=self.temperature,
        )
        self._throttle()
        result = complete(request, self.provider, self.templates, retries=self.retries)
        self.calls.append(result)
        return result

    def complete_json(self, template_id: str, variables: Mapping[str, str]):
        """Structured completion with a single identical-prompt retry."""
        result = self.complete(template_id, variables)
        try:
            return parse_json_response(result.text)
        except ValueError:
            pass
        result = self.complete(template_id, variables)
        try:
            return parse_json_response(result.text)
        except ValueError as exc:
            raise MalformedOutputError(
                f"template {template_id!r} returned unparseable JSON twice"
            ) from exc


# ---------------------------------------------------------------------------
# Moderation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModerationResult:
    allowed: bool
    reason: str | None = None


class Moderator(Protocol):
    def check(self, query: str) -> ModerationResult: ...


class DenylistModerator:
    """Substring denylist; the default list is empty (everything passes)."""

    def __init__(self, phrases: Sequence[str] = ()):
        self.phrases = [p.strip().lower() for p in phrases if p.strip()]

    def check(self, query: str) -> ModerationResult:
        lowered = query.lower()
        for phrase in self.phrases:
            if phrase in lowered:
                return ModerationResult(False, f"query matches blocked phrase {phrase!r}")
        return ModerationResult(True)


def moderate_query(
    query: str, moderator: Moderator | None = None, fail_closed: bool = True
) -> ModerationResult:
    """Run the moderation hook; on moderator breakage, fail per config."""
    moderator = moderator or DenylistModerator()
    try:
        return moderator.check(query)
    except Exception as exc:
        if fail_closed:
            return ModerationResult(False, f"moderation unavailable: {exc}")
        return ModerationResult(True)
