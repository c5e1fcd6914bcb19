import json

import pytest

from sciqa.gateway import (
    ATTRIBUTION_JUDGE,
    CompletionRequest,
    DECOMPOSE,
    DEFAULT_TEMPLATES,
    DenylistModerator,
    EXTRACT_QUOTES,
    Gateway,
    HeuristicProvider,
    MalformedOutputError,
    ModerationResult,
    PromptTemplate,
    RenderError,
    RetriableProviderError,
    ScriptEntry,
    ScriptedProvider,
    TEMPLATE_IDS,
    UnmatchedScriptError,
    complete,
    moderate_query,
    parse_json_response,
    variables_digest,
)


def req(template_id=DECOMPOSE, **variables):
    return CompletionRequest(template_id=template_id, variables=variables)


def test_all_default_templates_render():
    sample = {
        name: "x"
        for name in (
            "query", "paper_id", "title", "context", "sections", "quotes", "quote_ids",
            "position", "format", "marker_ids", "example_marker", "references",
            "prior_sections", "section_title", "abstracts", "aspect", "paper_text",
            "question", "text", "claim", "ref_excerpt",
        )
    }
    for tid in TEMPLATE_IDS:
        assert tid in DEFAULT_TEMPLATES
        rendered = DEFAULT_TEMPLATES[tid].render(sample)
        assert rendered


def test_render_unbound_placeholder_names_it():
    template = PromptTemplate("t", "Hello {name}, {missing}!", "text")
    with pytest.raises(RenderError) as err:
        template.render({"name": "world"})
    assert "missing" in str(err.value)


def test_scripted_exact_response():
    provider = ScriptedProvider([ScriptEntry(DECOMPOSE, response="canned")])
    result = complete(req(query="q"), provider)
    assert result.text == "canned"
    assert result.provider_id == "scripted"


def test_scripted_digest_match():
    digest = variables_digest({"query": "exact"})
    provider = ScriptedProvider(
        [
            ScriptEntry(DECOMPOSE, response="wrong", digest=variables_digest({"query": "other"})),
            ScriptEntry(DECOMPOSE, response="right", digest=digest),
        ]
    )
    assert complete(req(query="exact"), provider).text == "right"


def test_scripted_where_match():
    provider = ScriptedProvider(
        [
            ScriptEntry(EXTRACT_QUOTES, response="for P2", where={"paper_id": "P2"}),
            ScriptEntry(EXTRACT_QUOTES, response="for P1", where={"paper_id": "P1"}),
        ]
    )
    out = complete(req(EXTRACT_QUOTES, query="q", paper_id="P1", title="t", context="c"), provider)
    assert out.text == "for P1"


def test_scripted_unmatched_is_hard_error():
    provider = ScriptedProvider([ScriptEntry(DECOMPOSE, response="x", digest="0" * 16)])
    with pytest.raises(UnmatchedScriptError) as err:
        complete(req(query="nope"), provider)
    assert variables_digest({"query": "nope"}) in str(err.value)


def test_scripted_max_uses_sequences_responses():
    provider = ScriptedProvider(
        [
            ScriptEntry(DECOMPOSE, response="first", max_uses=1),
            ScriptEntry(DECOMPOSE, response="second"),
        ]
    )
    assert complete(req(query="q"), provider).text == "first"
    assert complete(req(query="q"), provider).text == "second"
    assert complete(req(query="q"), provider).text == "second"


def test_retriable_failure_retries_then_raises():
    provider = ScriptedProvider(
        [
            ScriptEntry(DECOMPOSE, fail="retriable", max_uses=1),
            ScriptEntry(DECOMPOSE, response="recovered"),
        ]
    )
    assert complete(req(query="q"), provider, retries=1).text == "recovered"
    always_fail = ScriptedProvider([ScriptEntry(DECOMPOSE, fail="retriable")])
    with pytest.raises(RetriableProviderError):
        complete(req(query="q"), always_fail, retries=2)


def test_complete_json_retries_once_then_types_failure():
    provider = ScriptedProvider(
        [
            ScriptEntry(DECOMPOSE, response="{not json", max_uses=1),
            ScriptEntry(DECOMPOSE, response=json.dumps({"keyword": "k"})),
        ]
    )
    gateway = Gateway(provider)
    assert gateway.complete_json(DECOMPOSE, {"query": "q"}) == {"keyword": "k"}

    twice_bad = Gateway(ScriptedProvider([ScriptEntry(DECOMPOSE, response="{nope")]))
    with pytest.raises(MalformedOutputError):
        twice_bad.complete_json(DECOMPOSE, {"query": "q"})


def test_parse_json_response_tolerates_fences_and_prose():
    assert parse_json_response('```json\n{"a": 1}\n```') == {"a": 1}
    assert parse_json_response('the answer is {"a": 2} ok') == {"a": 2}
    with pytest.raises(ValueError):
        parse_json_response("no json here")


def test_gateway_records_usage():
    gateway = Gateway(ScriptedProvider([ScriptEntry(DECOMPOSE, response="three word reply")]))
    result = gateway.complete(DECOMPOSE, {"query": "some question"})
    assert result.completion_tokens == 3
    assert len(gateway.calls) == 1


def test_moderation_allows_benign_query():
    assert moderate_query("how do rerankers work?", DenylistModerator([])).allowed


def test_moderation_blocks_denylisted_phrase():
    verdict = moderate_query("tell me about Forbidden Topic now", DenylistModerator(["forbidden topic"]))
    assert not verdict.allowed
    assert "forbidden topic" in verdict.reason


class _BrokenModerator:
    def check(self, query: str) -> ModerationResult:
        raise ConnectionError("endpoint down")


def test_moderation_fail_closed_and_open():
    closed = moderate_query("q", _BrokenModerator(), fail_closed=True)
    assert not closed.allowed
    assert "endpoint down" in closed.reason
    assert moderate_query("q", _BrokenModerator(), fail_closed=False).allowed


def test_heuristic_provider_covers_all_templates():
    provider = HeuristicProvider()
    gateway = Gateway(provider)
    assert "keyword" in gateway.complete_json(DECOMPOSE, {"query": "q"})
    quotes = gateway.complete(
        EXTRACT_QUOTES,
        {"query": "q", "paper_id": "P", "title": "t",
         "context": "First sentence here. Second sentence there. Third."},
    ).text
    assert "..." in quotes
    verdict = gateway.complete_json(
        ATTRIBUTION_JUDGE, {"claim": "cats sleep a lot", "ref_excerpt": "cats sleep a lot daily"}
    )
    assert verdict["output"] == "Attributable"


def test_throttle_delay_computation():
    from sciqa.gateway import throttle_delay

    assert throttle_delay(10.0, 10.4, 1.0) == pytest.approx(0.6)
    assert throttle_delay(10.0, 12.0, 1.0) == 0.0
    assert throttle_delay(float("-inf"), 0.0, 1.0) == 0.0


def test_rate_limited_gateway_still_completes():
    gateway = Gateway(
        ScriptedProvider([ScriptEntry(DECOMPOSE, response="ok")]),
        rate_limit_per_s=10_000.0,
    )
    for _ in range(3):
        assert gateway.complete(DECOMPOSE, {"query": "q"}).text == "ok"
