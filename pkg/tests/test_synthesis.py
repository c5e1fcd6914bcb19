import json

import pytest
from hypothesis import given, settings, strategies as st

from sciqa.corpus import chunk_paper
from sciqa.gateway import (
    ASSIGN_QUOTES,
    EXTRACT_QUOTES,
    Gateway,
    OUTLINE,
    SECTION,
    ScriptEntry,
    ScriptedProvider,
    TABLE_ASPECTS,
    TABLE_VALUE,
)
from sciqa.index import ScoredPassage
from sciqa.rerank import RerankedSet
from sciqa.synthesis import (
    Cell,
    CitationRef,
    ComparisonTable,
    Diagnostics,
    MarkerRegistry,
    OutlineSection,
    ReportSection,
    build_paper_contexts,
    build_reference_pool,
    cited_corpus_papers,
    extract_quotes,
    filter_table,
    follow_citations,
    generate_section,
    generate_table,
    plan_outline,
    verify_quote,
)
from tests.conftest import make_corpus

QUERY = "how do hybrid retrieval systems rank scientific papers?"


def reranked_for(corpus, paper_ids):
    entries = []
    score = 1.0
    for pid in paper_ids:
        for passage in chunk_paper(corpus.get(pid)):
            entries.append((ScoredPassage.from_passage(passage, 0, 0, 0, 0.5, "both"), score))
            score -= 0.01
    return RerankedSet(entries=tuple(entries), retained_k=50)


def gateway_with(entries):
    return Gateway(ScriptedProvider(entries))


# ---------------------------------------------------------------------------
# Quote extraction
# ---------------------------------------------------------------------------


def test_extract_two_quotes_with_resolved_spans():
    corpus = make_corpus()
    reranked = reranked_for(corpus, ["P1"])
    gw = gateway_with(
        [
            ScriptEntry(
                EXTRACT_QUOTES,
                response=(
                    "Sparse retrieval uses exact term matching. ... "
                    "Long documents receive a penalty so short relevant passages win."
                ),
            )
        ]
    )
    diag = Diagnostics()
    quotes = extract_quotes(QUERY, reranked, corpus, gw, diag)
    assert [q.quote_id for q in quotes] == ["q1", "q2"]
    assert quotes[0].paper_id == "P1"
    assert quotes[0].field_key == "abstract"
    ctx = build_paper_contexts(reranked, corpus)[0]
    assert all(verify_quote(q, ctx.assembled_text) for q in quotes)
    # The first quote overlaps the citation anchor into P4.
    assert quotes[0].embedded_citations == ("P4",)
    assert quotes[1].embedded_citations == ()
    assert diag.dropped_quotes == 0
    # Span resolution points back into the abstract text.
    abstract = corpus.get("P1").abstract
    lo, hi = quotes[0].field_span
    assert abstract[lo:hi] == quotes[0].text


def test_extract_drops_hallucinated_fragment():
    corpus = make_corpus()
    reranked = reranked_for(corpus, ["P1"])
    gw = gateway_with(
        [
            ScriptEntry(
                EXTRACT_QUOTES,
                response="Sparse retrieval uses exact term matching. ... entirely invented words",
            )
        ]
    )
    diag = Diagnostics()
    quotes = extract_quotes(QUERY, reranked, corpus, gw, diag)
    assert len(quotes) == 1
    assert diag.dropped_quotes == 1
    assert diag.warnings


def test_extract_sentinel_discards_paper():
    corpus = make_corpus()
    reranked = reranked_for(corpus, ["P1"])
    gw = gateway_with([ScriptEntry(EXTRACT_QUOTES, response="NONE")])
    diag = Diagnostics()
    assert extract_quotes(QUERY, reranked, corpus, gw, diag) == []
    assert diag.discarded_papers == 1


def test_extract_unicode_ellipsis_and_whitespace_mangling():
    corpus = make_corpus()
    reranked = reranked_for(corpus, ["P1"])
    gw = gateway_with(
        [
            ScriptEntry(
                EXTRACT_QUOTES,
                response=(
                    "Sparse   retrieval uses\nexact term matching. … "
                    "It remains a strong baseline for scientific search."
                ),
            )
        ]
    )
    quotes = extract_quotes(QUERY, reranked, corpus, gw, Diagnostics())
    assert len(quotes) == 2
    assert quotes[0].text == "Sparse retrieval uses exact term matching."


def test_extract_gateway_failure_drops_paper_and_continues():
    corpus = make_corpus()
    reranked = reranked_for(corpus, ["P1", "P2"])
    gw = gateway_with(
        [
            ScriptEntry(EXTRACT_QUOTES, where={"paper_id": "P1"}, fail="hard"),
            ScriptEntry(
                EXTRACT_QUOTES,
                where={"paper_id": "P2"},
                response="Binary codes keep the index small.",
            ),
        ]
    )
    diag = Diagnostics()
    quotes = extract_quotes(QUERY, reranked, corpus, gw, diag)
    assert [q.paper_id for q in quotes] == ["P2"]
    assert diag.warnings


def test_contexts_group_by_paper_in_rank_order():
    corpus = make_corpus()
    reranked = reranked_for(corpus, ["P2", "P1"])
    contexts = build_paper_contexts(reranked, corpus)
    assert [c.paper_id for c in contexts] == ["P2", "P1"]
    assert contexts[0].assembled_text.startswith(corpus.get("P2").abstract)


# ---------------------------------------------------------------------------
# Outline planning
# ---------------------------------------------------------------------------


def outline_entries(sections, assignments=None):
    entries = [ScriptEntry(OUTLINE, response=json.dumps({"sections": sections}))]
    if assignments is not None:
        entries.append(
            ScriptEntry(ASSIGN_QUOTES, response=json.dumps({"assignments": assignments}))
        )
    return entries


def fake_quotes(n):
    return [
        type(
            "Q",
            (),
            {
                "quote_id": f"q{i + 1}",
                "paper_id": "P1",
                "text": f"text {i}",
                "marker": f"Q{i + 1}",
                "embedded_citations": (),
            },
        )()
        for i in range(n)
    ]


def test_outline_parses_sections_and_assignments():
    quotes = fake_quotes(5)
    gw = gateway_with(
        outline_entries(
            [
                {"title": "Background", "format": "paragraph"},
                {"title": "Methods", "format": "bullets"},
                {"title": "Open problems", "format": "paragraph"},
            ],
            assignments={"q1": [1], "q2": [1, 2], "q3": [2], "q4": [], "q5": [1]},
        )
    )
    diag = Diagnostics()
    outline = plan_outline(QUERY, quotes, gw, diag)
    assert [s.title for s in outline] == ["Background", "Methods", "Open problems"]
    assert [s.format for s in outline] == ["paragraph", "bullets", "paragraph"]
    assert outline[1].assigned_quote_ids == ["q1", "q2", "q5"]
    assert outline[2].assigned_quote_ids == ["q2", "q3"]
    assert diag.unassigned_quotes == ["q4"]
    # A section with no quotes survives planning.
    assert outline[0].assigned_quote_ids == []


def test_outline_without_intro_gets_one_inserted():
    gw = gateway_with(
        outline_entries(
            [{"title": "Deep dives", "format": "bullets"}],
            assignments={"q1": [1]},
        )
    )
    outline = plan_outline(QUERY, fake_quotes(1), gw, Diagnostics())
    assert outline[0].title == "Introduction"
    assert outline[0].format == "paragraph"
    assert outline[0].position == 0
    assert outline[1].title == "Deep dives"
    assert outline[1].position == 1
    assert outline[1].assigned_quote_ids == ["q1"]


def test_outline_malformed_falls_back_to_single_section():
    gw = gateway_with([ScriptEntry(OUTLINE, response="not json at all")])
    diag = Diagnostics()
    quotes = fake_quotes(3)
    outline = plan_outline(QUERY, quotes, gw, diag)
    assert len(outline) == 1
    assert outline[0].title == "Answer"
    assert outline[0].format == "paragraph"
    assert outline[0].assigned_quote_ids == ["q1", "q2", "q3"]
    assert diag.warnings


def test_outline_skips_assignment_call_when_no_quotes():
    gw = gateway_with(outline_entries([{"title": "Background", "format": "paragraph"}]))
    outline = plan_outline(QUERY, [], gw, Diagnostics())
    assert len(outline) == 1


# ---------------------------------------------------------------------------
# Citation following
# ---------------------------------------------------------------------------


def extract_p1_quotes(corpus):
    reranked = reranked_for(corpus, ["P1"])
    gw = gateway_with(
        [
            ScriptEntry(
                EXTRACT_QUOTES,
                response="Sparse retrieval uses exact term matching.",
            )
        ]
    )
    return extract_quotes(QUERY, reranked, corpus, gw, Diagnostics())


def test_follow_citations_pulls_cited_abstract():
    corpus = make_corpus()
    quotes = extract_p1_quotes(corpus)
    pool = follow_citations(quotes, corpus, Diagnostics())
    assert pool == [("P4", corpus.get("P4").abstract)]


def test_follow_citations_dedups_and_counts_missing():
    corpus = make_corpus()
    quotes = extract_p1_quotes(corpus) * 2  # same citation twice
    diag = Diagnostics()
    pool = follow_citations(quotes, corpus, diag)
    assert len(pool) == 1

    class FakeQuote:
        embedded_citations = ("GHOST",)

    diag2 = Diagnostics()
    assert follow_citations([FakeQuote()], corpus, diag2) == []
    assert diag2.missing_cited == 1


def test_quote_without_anchor_adds_nothing():
    corpus = make_corpus()
    reranked = reranked_for(corpus, ["P2"])
    gw = gateway_with(
        [ScriptEntry(EXTRACT_QUOTES, response="Binary codes keep the index small.")]
    )
    quotes = extract_quotes(QUERY, reranked, corpus, gw, Diagnostics())
    assert follow_citations(quotes, corpus, Diagnostics()) == []


# ---------------------------------------------------------------------------
# Section generation
# ---------------------------------------------------------------------------


def one_section_outline():
    return [OutlineSection(title="Findings", format="paragraph", position=0)]


def pool_with_q3(corpus):
    refs = [
        CitationRef(marker="Q3", kind="quote", paper_id="P1", quote_id="q3",
                    text="a quote", paper_title="Sparse retrieval for science"),
    ]
    return refs


def test_section_citations_map_quote_and_memory():
    corpus = make_corpus()
    gw = gateway_with(
        [
            ScriptEntry(
                SECTION,
                response=json.dumps(
                    {"tldr": "short", "body": "Claim one [Q3]. Claim two [M]."}
                ),
            )
        ]
    )
    section = generate_section(
        QUERY, one_section_outline(), 0, [], pool_with_q3(corpus), gw, Diagnostics()
    )
    assert set(section.citations) == {"Q3", "M"}
    assert section.citations["Q3"].kind == "quote"
    assert section.citations["M"].kind == "memory"
    assert section.tldr == "short"


def test_section_empty_pool_goes_memory_only():
    gw = gateway_with(
        [
            ScriptEntry(
                SECTION,
                response=json.dumps(
                    {"tldr": "t", "body": "Everything here is model memory [M]."}
                ),
            )
        ]
    )
    section = generate_section(QUERY, one_section_outline(), 0, [], [], gw, Diagnostics())
    assert set(section.citations) == {"M"}


def test_section_unknown_marker_rewritten_to_memory():
    corpus = make_corpus()
    gw = gateway_with(
        [
            ScriptEntry(
                SECTION,
                response=json.dumps({"tldr": "t", "body": "A bold claim [Q99]. Ok [Q3]."}),
            )
        ]
    )
    diag = Diagnostics()
    section = generate_section(
        QUERY, one_section_outline(), 0, [], pool_with_q3(corpus), gw, diag
    )
    assert "[M]" in section.body
    assert "[Q99]" not in section.body
    assert set(section.citations) == {"M", "Q3"}
    assert diag.memory_citations == 1
    assert any("Q99" in w for w in diag.warnings)


def test_section_failure_yields_placeholder_and_continues():
    gw = gateway_with([ScriptEntry(SECTION, fail="hard")])
    diag = Diagnostics()
    section = generate_section(QUERY, one_section_outline(), 0, [], [], gw, diag)
    assert section.body == "(section generation failed)"
    assert section.citations == {}
    assert diag.warnings


def test_section_serial_precondition():
    gw = gateway_with([])
    outline = [
        OutlineSection(title="A", format="paragraph", position=0),
        OutlineSection(title="B", format="paragraph", position=1),
    ]
    with pytest.raises(ValueError):
        generate_section(QUERY, outline, 1, [], [], gw, Diagnostics())


def test_section_multi_marker_bracket():
    corpus = make_corpus()
    gw = gateway_with(
        [
            ScriptEntry(
                SECTION,
                response=json.dumps({"tldr": "t", "body": "Joint claim [Q3, Q99]."}),
            )
        ]
    )
    section = generate_section(
        QUERY, one_section_outline(), 0, [], pool_with_q3(corpus), gw, Diagnostics()
    )
    assert "[Q3, M]" in section.body


def test_reference_pool_markers_are_stable():
    corpus = make_corpus()
    quotes = extract_p1_quotes(corpus)
    registry = MarkerRegistry()
    followed = follow_citations(quotes, corpus, Diagnostics())
    pool = build_reference_pool(quotes, followed, corpus, registry)
    assert [r.marker for r in pool] == ["Q1", "A1"]
    assert pool[1].paper_id == "P4"
    # Same paper keeps its marker across sections.
    pool2 = build_reference_pool([], followed, corpus, registry)
    assert [r.marker for r in pool2] == ["A1"]


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def bullets_section(citations):
    body_markers = " ".join(f"[{m}]" for m in citations)
    return ReportSection(
        position=1,
        title="Compared systems",
        tldr="t",
        body=f"- item {body_markers}",
        format="bullets",
        citations={
            m: CitationRef(marker=m, kind="quote", paper_id=pid, quote_id=m.lower(), text="x")
            for m, pid in citations.items()
        },
    )


def table_gateway(aspects, papers, missing=()):
    entries = [ScriptEntry(TABLE_ASPECTS, response=json.dumps({"aspects": aspects}))]
    for pid in papers:
        for aspect in aspects:
            if (pid, aspect) in missing:
                response = json.dumps({"value": "MISSING"})
            else:
                response = json.dumps({"value": f"{pid}-{aspect}", "evidence": f"ev {pid}"})
            entries.append(
                ScriptEntry(TABLE_VALUE, response=response, where={"paper_id": pid, "aspect": aspect})
            )
    return Gateway(ScriptedProvider(entries))


def test_paragraph_section_gets_no_table():
    corpus = make_corpus()
    section = bullets_section({"Q1": "P1", "Q2": "P2"})
    section.format = "paragraph"
    gw = table_gateway(["A"], ["P1", "P2"])
    assert generate_table(QUERY, section, ["P1", "P2"], corpus, gw, Diagnostics()) is None


def test_single_cited_paper_gets_no_table():
    corpus = make_corpus()
    section = bullets_section({"Q1": "P1"})
    gw = table_gateway(["A"], ["P1"])
    assert generate_table(QUERY, section, ["P1"], corpus, gw, Diagnostics()) is None


def test_three_papers_four_aspects_fill_twelve_cells():
    corpus = make_corpus()
    aspects = ["A1", "A2", "A3", "A4"]
    papers = ["P1", "P2", "P3"]
    section = bullets_section({"Q1": "P1", "Q2": "P2", "Q3": "P3"})
    gw = table_gateway(aspects, papers)
    table = generate_table(QUERY, section, papers, corpus, gw, Diagnostics())
    assert table is not None
    assert table.columns == aspects
    assert table.rows == papers
    # One aspects call plus 12 cell calls.
    assert len(gw.calls) == 13
    assert all(table.cells[(r, c)] is not None for r in range(3) for c in range(4))
    assert table.cells[(0, 0)].value == "P1-A1"


def test_cited_corpus_papers_ordered_by_first_use():
    corpus = make_corpus()
    section = bullets_section({"Q2": "P2", "Q1": "P1"})
    section.body = "- first [Q2]\n- second [Q1, Q2]"
    assert cited_corpus_papers(section, corpus) == ["P2", "P1"]
    # Memory and unknown-paper citations are ignored.
    section.citations["M"] = CitationRef(marker="M", kind="memory")
    section.body += "\n- third [M]"
    assert cited_corpus_papers(section, corpus) == ["P2", "P1"]


# ---------------------------------------------------------------------------
# Table filtering
# ---------------------------------------------------------------------------


def make_table(mask):
    rows = len(mask)
    cols = len(mask[0]) if rows else 0
    cells = {}
    for r in range(rows):
        for c in range(cols):
            cells[(r, c)] = None if mask[r][c] else Cell(value=f"v{r}{c}")
    return ComparisonTable(
        position=0,
        columns=[f"col{c}" for c in range(cols)],
        rows=[f"row{r}" for r in range(rows)],
        cells=cells,
    )


def filter_oracle(mask, tau):
    """Independent fixpoint: drop worst column > tau (ties: higher index),
    then worst rows, repeat until stable. Returns kept (rows, cols)."""
    rows = list(range(len(mask)))
    cols = list(range(len(mask[0]) if mask else 0))
    while rows and cols:
        dropped = False
        while cols:
            fracs = [(sum(mask[r][c] for r in rows) / len(rows), c) for c in cols]
            frac, c = max(fracs)
            if frac > tau:
                cols.remove(c)
                dropped = True
            else:
                break
        while cols and rows:
            fracs = [(sum(mask[r][c] for c in cols) / len(cols), r) for r in rows]
            frac, r = max(fracs)
            if frac > tau:
                rows.remove(r)
                dropped = True
            else:
                break
        if not dropped:
            break
    if not rows or not cols:
        return [], []
    return rows, cols


def test_filter_full_table_unchanged():
    table = make_table([[False] * 4 for _ in range(4)])
    out = filter_table(table, tau=0.5)
    assert out.columns == table.columns
    assert out.rows == table.rows


def test_filter_drops_sparse_column():
    mask = [
        [True, False],
        [True, False],
        [True, False],
        [False, False],
    ]
    out = filter_table(make_table(mask), tau=0.5)
    assert out.columns == ["col1"]
    assert len(out.rows) == 4


def test_filter_can_empty_the_table():
    mask = [[True, True], [True, True]]
    out = filter_table(make_table(mask), tau=0.5)
    assert out.rows == [] and out.columns == []


@settings(max_examples=80, deadline=None)
@given(
    mask=st.lists(
        st.lists(st.booleans(), min_size=1, max_size=6),
        min_size=1,
        max_size=6,
    ).filter(lambda m: len({len(r) for r in m}) == 1),
    tau=st.sampled_from([0.0, 0.25, 0.5, 0.75]),
)
def test_filter_matches_fixpoint_oracle(mask, tau):
    table = make_table(mask)
    out = filter_table(table, tau=tau)
    rows, cols = filter_oracle(mask, tau)
    assert out.rows == [f"row{r}" for r in rows]
    assert out.columns == [f"col{c}" for c in cols]
    # Post-filter guarantee: nothing sparser than tau remains.
    for c in range(len(out.columns)):
        assert out.missing_fraction_col(c) <= tau
    for r in range(len(out.rows)):
        assert out.missing_fraction_row(r) <= tau
