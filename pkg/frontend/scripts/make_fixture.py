"""Regenerate the frontend test fixtures from the real pipeline.

Run from the repository root:

    PYTHONPATH=. python3 frontend/scripts/make_fixture.py

Produces tests/fixtures/events.ndjson (a stored progress-event log for a
three-section report with a comparison table) and report.json (the
materialized report, used by backfill tests). Deterministic: scripted
gateway, fake clock, fixed ids.
"""

from __future__ import annotations

import json
import pathlib
import sys

ROOT = pathlib.Path(__file__).resolve().parents[2]
sys.path.insert(0, str(ROOT))

from sciqa.corpus import chunk_paper
from sciqa.embedding import HashEmbeddingProvider
from sciqa.gateway import ASSIGN_QUOTES, OUTLINE, SECTION, ScriptEntry
from sciqa.index import IndexConfig, build_index
from sciqa.store import ReportStore
from tests.conftest import make_corpus, make_engine, make_script

QUERY = "how do hybrid retrieval systems rank scientific papers?"

OUT = pathlib.Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main() -> None:
    corpus = make_corpus()
    provider = HashEmbeddingProvider(dim=64, seed=7)
    passages = [p for paper in corpus for p in chunk_paper(paper)]
    index = build_index(passages, provider, IndexConfig(), papers=corpus)

    script = [
        ScriptEntry(
            OUTLINE,
            response=json.dumps(
                {
                    "sections": [
                        {"title": "Background", "format": "paragraph"},
                        {"title": "Fusion approaches", "format": "bullets"},
                        {"title": "Open problems", "format": "paragraph"},
                    ]
                }
            ),
            where={"query": QUERY},
        ),
        ScriptEntry(
            SECTION,
            response=json.dumps(
                {
                    "tldr": "Where fused rankers still fall short.",
                    "body": (
                        "Tuning fusion weights per domain remains open [Q3]. "
                        "Some speculation here is model memory [M]."
                    ),
                }
            ),
            where={"title": "Open problems"},
        ),
        ScriptEntry(
            ASSIGN_QUOTES,
            response=json.dumps(
                {
                    "assignments": {
                        "q1": [0, 1],
                        "q2": [1],
                        "q3": [1, 2],
                        **{f"q{i}": [1] for i in range(4, 13)},
                    }
                }
            ),
        ),
    ] + make_script([QUERY])

    store_dir = OUT / "_store"
    engine = make_engine(corpus, index, script=script, store=ReportStore(store_dir))
    events = list(engine.run(QUERY))

    OUT.mkdir(parents=True, exist_ok=True)
    with (OUT / "events.ndjson").open("w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event.to_line() + "\n")
    report = engine.store.get_report(events[0].report_id)
    (OUT / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    import shutil

    shutil.rmtree(store_dir)
    kinds = [e.kind for e in events]
    print(f"wrote {len(events)} events ({kinds}) and report.json")


if __name__ == "__main__":
    main()
