"""Command-line interface.

    sciqa ingest --corpus papers.jsonl --out store/
    sciqa index build --corpus store/ --out index/
    sciqa index search --index index/ --q "graph pruning" --k 10 --year 2018:2024
    sciqa retrieve --q "..." --index index/ --corpus store/
    sciqa rerank --q "..." --in candidates.json --k 50
    sciqa ask "how do rerankers help scientific QA?" --config sciqa.json
    sciqa serve --config sciqa.json --port 8000
    sciqa eval retrieval --labels labels.jsonl --runs runs.jsonl
    sciqa eval sweep --grid 0:1:0.1 --labels labels.jsonl --queries queries.jsonl --index index/
    sciqa eval cite --report report.json --judge heuristic
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from . import events as ev
from .config import AppConfig, build_engine, load_config, make_embedding_provider, make_gateway
from .corpus import chunk_paper, ingest_corpus, paper_to_record
from .evalkit import (
    FixedJudge,
    GatewayJudge,
    ScriptedJudge,
    citation_scores,
    load_labels,
    load_runs,
    mrr,
    ndcg_at_k,
    sweep_weights,
)
from .gateway import Gateway, HeuristicProvider
from .index import HybridIndex, IndexConfig, MetadataFilter, build_index
from .rerank import TokenOverlapScorer, rerank_top_k
from .retrieval import CandidateSet, DecomposedQuery, decompose, retrieve
from .service import create_app


@click.group()
def main():
    """Long-form scientific QA over a local paper corpus."""


def _open_corpus(path: str):
    p = Path(path)
    if p.is_dir():
        p = p / "corpus.jsonl"
    return p.open(encoding="utf-8")


@main.command()
@click.option("--corpus", "corpus_path", required=True, help="line-delimited paper records")
@click.option("--out", "out_path", required=True, help="validated corpus store directory")
def ingest(corpus_path: str, out_path: str):
    """Validate a corpus file into a store directory."""
    with open(corpus_path, encoding="utf-8") as fh:
        corpus = ingest_corpus(fh)
    report = corpus.ingest_report
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "corpus.jsonl").open("w", encoding="utf-8") as fh:
        for paper in corpus:
            fh.write(json.dumps(paper_to_record(paper), ensure_ascii=False) + "\n")
    (out / "manifest.json").write_text(
        json.dumps(
            {"papers": len(corpus), "skipped": report.skipped, "errors": report.errors},
            indent=2,
        )
    )
    for line, message in report.errors:
        click.echo(f"line {line}: {message}", err=True)
    click.echo(f"ingested {len(corpus)} papers, skipped {report.skipped}")


@main.group()
def index():
    """Build or query the hybrid index."""


@index.command("build")
@click.option("--corpus", "corpus_path", required=True)
@click.option("--out", "out_path", required=True)
@click.option("--dim", default=256, show_default=True)
@click.option("--seed", default=13, show_default=True)
@click.option("--w-dense", default=0.6, show_default=True)
def index_build(corpus_path: str, out_path: str, dim: int, seed: int, w_dense: float):
    """Chunk, embed, quantize, and persist the index."""
    with _open_corpus(corpus_path) as fh:
        corpus = ingest_corpus(fh)
    cfg = AppConfig(embed_dim=dim, embed_seed=seed)
    provider = make_embedding_provider(cfg)
    passages = [p for paper in corpus for p in chunk_paper(paper)]
    config = IndexConfig.with_dense_weight(w_dense)
    idx = build_index(passages, provider, config, papers=corpus)
    idx.save(out_path)
    click.echo(f"indexed {len(passages)} passages from {len(corpus)} papers -> {out_path}")


def _parse_year(spec: str | None) -> tuple[int | None, int | None] | None:
    if not spec:
        return None
    lo, _, hi = spec.partition(":")
    return (int(lo) if lo else None, int(hi) if hi else None)


def _load_index(index_path: str, dim: int = 256, seed: int = 13) -> HybridIndex:
    cfg = AppConfig(embed_dim=dim, embed_seed=seed)
    return HybridIndex.load(index_path, provider=make_embedding_provider(cfg))


@index.command("search")
@click.option("--index", "index_path", required=True)
@click.option("--q", "query", required=True)
@click.option("--k", default=50, show_default=True)
@click.option("--year", default=None, help="YYYY:YYYY (either side optional)")
@click.option("--venue", multiple=True)
@click.option("--fos", multiple=True, help="field of study filter")
def index_search(index_path: str, query: str, k: int, year, venue, fos):
    """Hybrid search against a persisted index."""
    idx = _load_index(index_path)
    flt = MetadataFilter(
        year_range=_parse_year(year),
        venues=frozenset(venue) or None,
        fields_of_study=frozenset(fos) or None,
    )
    hits = idx.search_hybrid(query, idx.embed_query(query), flt, k=k)
    for hit in hits:
        click.echo(
            f"{hit.fused_score:8.4f}  {hit.passage_id}  "
            f"[dense {hit.dense_score:+.4f} sparse {hit.sparse_score_norm:.4f}] "
            f"{hit.text[:80]!r}"
        )


@main.command(name="retrieve")
@click.option("--q", "query", required=True)
@click.option("--index", "index_path", required=True)
@click.option("--k", default=256, show_default=True)
@click.option("--config", "config_path", default=None)
def retrieve_cmd(query: str, index_path: str, k: int, config_path):
    """Decompose a query and print the candidate set as JSON."""
    cfg = load_config(config_path)
    idx = _load_index(index_path, cfg.embed_dim, cfg.embed_seed)
    gateway = make_gateway(cfg) if config_path else Gateway(HeuristicProvider())
    dq = decompose(query, gateway, warn=lambda m: click.echo(m, err=True))
    candidates = retrieve(dq, idx, snippet_cap=k)
    click.echo(json.dumps(candidates.to_json(), indent=2, ensure_ascii=False))


@main.command()
@click.option("--q", "query", required=True)
@click.option("--in", "in_path", required=True, help="candidates JSON from `retrieve`")
@click.option("--k", default=50, show_default=True)
def rerank(query: str, in_path: str, k: int):
    """Rerank a stored candidate set and print the retained entries."""
    candidates = CandidateSet.from_json(json.loads(Path(in_path).read_text(encoding="utf-8")))
    result = rerank_top_k(query, candidates, TokenOverlapScorer(), k=k)
    for passage, score in result.entries:
        click.echo(f"{score:8.4f}  {passage.passage_id}  {passage.text[:80]!r}")


def _render_markdown(report: dict) -> str:
    lines = [f"# {report['query']}", ""]
    for sec in report["sections"]:
        lines.append(f"## {sec['title']}")
        if sec.get("tldr"):
            lines.append(f"*{sec['tldr']}*")
        lines.append("")
        lines.append(sec["body"])
        lines.append("")
        table = sec.get("table")
        if table:
            def cell_text(c):
                if not c:
                    return "(missing)"
                return " ".join(c["value"].split()).replace("|", "/")

            lines.append("| paper | " + " | ".join(table["columns"]) + " |")
            lines.append("|---" * (len(table["columns"]) + 1) + "|")
            for pid, row in zip(table["rows"], table["cells"]):
                lines.append(f"| {pid} | " + " | ".join(cell_text(c) for c in row) + " |")
            lines.append("")
        if sec.get("citations"):
            refs = []
            for marker, ref in sec["citations"].items():
                if ref.get("kind") == "memory":
                    refs.append(f"[{marker}] model memory")
                else:
                    refs.append(f"[{marker}] {ref.get('paper_id')}: {ref.get('paper_title', '')}")
            lines.append("Sources: " + "; ".join(refs))
            lines.append("")
    diag = report.get("diagnostics", {})
    if diag.get("warnings"):
        lines.append(f"({len(diag['warnings'])} warnings; see JSON report for details)")
    return "\n".join(lines)


@main.command()
@click.argument("question")
@click.option("--config", "config_path", default=None, help="JSON config file")
@click.option("--json", "as_json", is_flag=True, help="print the report as JSON (default)")
@click.option("--markdown", "as_markdown", is_flag=True, help="print the report as Markdown")
def ask(question: str, config_path, as_json: bool, as_markdown: bool):
    """Run one query end to end; progress on stderr, report on stdout."""
    cfg = load_config(config_path)
    engine = build_engine(cfg)

    def show(event):
        click.echo(f"[{event.seq:03d}] {event.kind}: {_brief(event)}", err=True)

    report = engine.ask(question, on_event=show)
    doc = report.to_json()
    if as_markdown and not as_json:
        click.echo(_render_markdown(doc))
    else:
        click.echo(json.dumps(doc, indent=2, ensure_ascii=False, sort_keys=True))


def _brief(event) -> str:
    payload = dict(event.payload)
    if event.kind == ev.SECTION:
        sec = payload.get("section", {})
        return f"#{sec.get('position')} {sec.get('title')!r}"
    if event.kind == ev.TABLE:
        return f"section {payload.get('position')}"
    return ", ".join(f"{k}={v}" for k, v in payload.items() if not isinstance(v, (dict, list)))


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(config_path, host: str, port: int):
    """Run the streaming HTTP service (and web UI when built)."""
    import uvicorn

    cfg = load_config(config_path)
    engine = build_engine(cfg)
    app = create_app(engine, webui_dir=cfg.webui_path)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.group(name="eval")
def eval_group():
    """Retrieval metrics, weight sweeps, and citation scoring."""


@eval_group.command("retrieval")
@click.option("--labels", "labels_path", required=True)
@click.option("--runs", "runs_path", required=True)
@click.option("--k", default=10, show_default=True)
def eval_retrieval(labels_path: str, runs_path: str, k: int):
    """nDCG@k and mRR of stored rankings against stored labels."""
    labels = load_labels(labels_path)
    runs = load_runs(runs_path)
    per_query = [ndcg_at_k(r, labels.get(qid, {}), k=k) for qid, r in runs.items()]
    score_ndcg = sum(per_query) / len(per_query) if per_query else 0.0
    click.echo(json.dumps({"ndcg_at_k": score_ndcg, "k": k, "mrr": mrr(runs, labels)}))


@eval_group.command("sweep")
@click.option("--grid", default="0:1:0.1", show_default=True, help="start:stop:step")
@click.option("--labels", "labels_path", required=True)
@click.option("--queries", "queries_path", required=True, help="jsonl {query_id, text}")
@click.option("--index", "index_path", required=True)
def eval_sweep(grid: str, labels_path: str, queries_path: str, index_path: str):
    """Sweep the dense weight and report both metrics per row."""
    start_s, stop_s, step_s = grid.split(":")
    start, stop, step = float(start_s), float(stop_s), float(step_s)
    ws = []
    w = start
    while w <= stop + 1e-9:
        ws.append(round(w, 10))
        w += step
    labels = load_labels(labels_path)
    queries = []
    with open(queries_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                queries.append((obj["query_id"], obj["text"]))
    idx = _load_index(index_path)
    result = sweep_weights(queries, labels, idx, ws)
    click.echo(json.dumps(result.to_json(), indent=2))


@eval_group.command("cite")
@click.option("--report", "report_path", required=True)
@click.option(
    "--judge",
    "judge_spec",
    default="heuristic",
    show_default=True,
    help="heuristic | fixed:<Verdict> | scripted:<file.json>",
)
def eval_cite(report_path: str, judge_spec: str):
    """Citation precision/recall of a stored report."""
    report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    if judge_spec.startswith("scripted:"):
        judge = ScriptedJudge.from_file(judge_spec.split(":", 1)[1])
    elif judge_spec.startswith("fixed:"):
        judge = FixedJudge(judge_spec.split(":", 1)[1])
    elif judge_spec == "heuristic":
        judge = GatewayJudge(Gateway(HeuristicProvider()))
    else:
        raise click.BadParameter(f"unknown judge {judge_spec!r}")
    scores = citation_scores(report, judge)
    click.echo(json.dumps(scores.to_json(), indent=2))


if __name__ == "__main__":
    main()
