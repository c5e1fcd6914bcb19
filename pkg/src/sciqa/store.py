"""Append-only report, event, and feedback persistence on local disk.

Layout under the store root, one directory per report:

    <root>/<report_id>/events.ndjson    append-only event log
    <root>/<report_id>/report.json      materialized report (written once)
    <root>/<report_id>/feedback.ndjson  append-only feedback log

Reports are immutable once materialized; feedback appends never touch
them. Appends to distinct reports may run concurrently; appends within one
report are serialized by a store-wide lock (cheap at this scale).
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path

from .events import ProgressEvent

_ID_RE = re.compile(r"^[0-9a-f]{4,64}$")

FEEDBACK_SCOPES = ("report", "section", "table")
POLARITIES = ("up", "down", "none")


class StoreError(Exception):
    pass


class ReportNotFoundError(StoreError):
    pass


@dataclass(frozen=True)
class FeedbackRecord:
    report_id: str
    scope: str  # "report" | "section" | "table"
    polarity: str  # "up" | "down" | "none"
    position: int | None = None
    text: str | None = None
    timestamp: float = 0.0

    def validate(self) -> None:
        if self.scope not in FEEDBACK_SCOPES:
            raise ValueError(f"unknown feedback scope {self.scope!r}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.scope in ("section", "table") and (self.position is None or self.position < 0):
            raise ValueError(f"{self.scope} feedback requires a non-negative position")
        if self.polarity == "none" and not (self.text and self.text.strip()):
            raise ValueError("feedback without a thumb requires non-empty text")

    def to_json(self) -> dict:
        return {
            "report_id": self.report_id,
            "scope": self.scope,
            "polarity": self.polarity,
            "position": self.position,
            "text": self.text,
            "timestamp": self.timestamp,
        }


class ReportStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _dir(self, report_id: str, create: bool = False) -> Path:
        if not _ID_RE.match(report_id):
            raise StoreError(f"malformed report id {report_id!r}")
        d = self.root / report_id
        if create:
            d.mkdir(parents=True, exist_ok=True)
        return d

    def exists(self, report_id: str) -> bool:
        try:
            return self._dir(report_id).is_dir()
        except StoreError:
            return False

    def append_event(self, event: ProgressEvent) -> None:
        d = self._dir(event.report_id, create=True)
        with self._lock:
            with (d / "events.ndjson").open("a", encoding="utf-8") as fh:
                fh.write(event.to_line() + "\n")
                fh.flush()

    def get_events(self, report_id: str) -> list[ProgressEvent]:
        d = self._dir(report_id)
        path = d / "events.ndjson"
        if not path.exists():
            raise ReportNotFoundError(report_id)
        events = []
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    events.append(ProgressEvent.from_json(json.loads(line)))
        return events

    def finalize_report(self, report_id: str, report_json: dict) -> None:
        d = self._dir(report_id, create=True)
        path = d / "report.json"
        with self._lock:
            if path.exists():
                raise StoreError(f"report {report_id} is already materialized")
            path.write_text(
                json.dumps(report_json, sort_keys=True, ensure_ascii=False), encoding="utf-8"
            )

    def get_report(self, report_id: str) -> dict:
        d = self._dir(report_id)
        path = d / "report.json"
        if not path.exists():
            raise ReportNotFoundError(report_id)
        return json.loads(path.read_text(encoding="utf-8"))

    def record_feedback(self, record: FeedbackRecord) -> None:
        record.validate()
        if not self.exists(record.report_id):
            raise ReportNotFoundError(record.report_id)
        d = self._dir(record.report_id)
        with self._lock:
            with (d / "feedback.ndjson").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
                fh.flush()

    def get_feedback(self, report_id: str) -> list[FeedbackRecord]:
        d = self._dir(report_id)
        path = d / "feedback.ndjson"
        if not d.is_dir():
            raise ReportNotFoundError(report_id)
        if not path.exists():
            return []
        records = []
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                records.append(
                    FeedbackRecord(
                        report_id=obj["report_id"],
                        scope=obj["scope"],
                        polarity=obj["polarity"],
                        position=obj.get("position"),
                        text=obj.get("text"),
                        timestamp=obj.get("timestamp", 0.0),
                    )
                )
        records.sort(key=lambda r: r.timestamp)
        return records
