"""HTTP service: streamed queries, report retrieval, and feedback.

Endpoints:

    POST /query    {"q": "..."} -> streamed newline-delimited JSON events
                   (send Accept: text/event-stream for SSE framing)
    GET  /report/{report_id}
    POST /feedback {"report_id", "scope", "polarity", "position?", "text?"}
    GET  /healthz

When a built web UI directory is configured it is served at the root, so
the whole demo runs from one process.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterator

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .pipeline import Engine
from .store import FeedbackRecord, ReportNotFoundError


class QueryBody(BaseModel):
    q: str


class FeedbackBody(BaseModel):
    report_id: str
    scope: str
    polarity: str
    position: int | None = None
    text: str | None = None


def create_app(engine: Engine, webui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="sciqa", docs_url=None, redoc_url=None)

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "papers": len(engine.corpus), "passages": len(engine.index)}

    @app.post("/query")
    def query(body: QueryBody, request: Request) -> StreamingResponse:
        wants_sse = "text/event-stream" in request.headers.get("accept", "")

        def ndjson() -> Iterator[str]:
            for event in engine.run(body.q):
                yield event.to_line() + "\n"

        def sse() -> Iterator[str]:
            for event in engine.run(body.q):
                yield f"data: {event.to_line()}\n\n"

        if wants_sse:
            return StreamingResponse(sse(), media_type="text/event-stream")
        return StreamingResponse(ndjson(), media_type="application/x-ndjson")

    @app.get("/report/{report_id}")
    def report(report_id: str) -> dict:
        if engine.store is None:
            raise HTTPException(status_code=404, detail="no report store configured")
        try:
            return engine.store.get_report(report_id)
        except ReportNotFoundError:
            raise HTTPException(status_code=404, detail=f"unknown report {report_id}")

    @app.post("/feedback")
    def feedback(body: FeedbackBody) -> dict:
        if engine.store is None:
            raise HTTPException(status_code=404, detail="no report store configured")
        record = FeedbackRecord(
            report_id=body.report_id,
            scope=body.scope,
            polarity=body.polarity,
            position=body.position,
            text=body.text,
            timestamp=engine.clock(),
        )
        try:
            engine.store.record_feedback(record)
        except ReportNotFoundError:
            raise HTTPException(status_code=404, detail=f"unknown report {body.report_id}")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"ok": True}

    if webui_dir and Path(webui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(webui_dir), html=True), name="webui")
    return app
