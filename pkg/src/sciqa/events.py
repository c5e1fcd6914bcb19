"""Progress events streamed while a query runs.

Each query produces a strictly increasing, gapless ``seq`` of events ending
in exactly one terminal event (``done``, ``error``, or ``blocked``). The
wire format is one JSON object per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping

ACCEPTED = "accepted"
BLOCKED = "blocked"
DECOMPOSED = "decomposed"
RETRIEVED = "retrieved"
RERANKED = "reranked"
QUOTES_EXTRACTED = "quotes_extracted"
OUTLINE = "outline"
SECTION = "section"
TABLE = "table"
DONE = "done"
WARNING = "warning"
ERROR = "error"

TERMINAL_KINDS = frozenset({DONE, ERROR, BLOCKED})
EVENT_KINDS = frozenset(
    {
        ACCEPTED,
        BLOCKED,
        DECOMPOSED,
        RETRIEVED,
        RERANKED,
        QUOTES_EXTRACTED,
        OUTLINE,
        SECTION,
        TABLE,
        DONE,
        WARNING,
        ERROR,
    }
)


@dataclass(frozen=True)
class ProgressEvent:
    report_id: str
    seq: int
    kind: str
    payload: Mapping[str, Any]
    timestamp: float

    @property
    def terminal(self) -> bool:
        return self.kind in TERMINAL_KINDS

    def to_json(self) -> dict:
        return {
            "report_id": self.report_id,
            "seq": self.seq,
            "kind": self.kind,
            "payload": dict(self.payload),
            "timestamp": self.timestamp,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ProgressEvent":
        return cls(
            report_id=obj["report_id"],
            seq=int(obj["seq"]),
            kind=obj["kind"],
            payload=obj.get("payload") or {},
            timestamp=float(obj.get("timestamp") or 0.0),
        )


def replay_sections(events: list[ProgressEvent]) -> list[dict]:
    """Rebuild the report's section JSON from a stored event log.

    Section events carry their section with ``table: null``; a later table
    event patches it in, matching what ``get_report`` returns.
    """
    sections: dict[int, dict] = {}
    for ev in events:
        if ev.kind == SECTION:
            sec = json.loads(json.dumps(ev.payload["section"]))
            sections[sec["position"]] = sec
        elif ev.kind == TABLE:
            position = ev.payload["position"]
            if position in sections:
                sections[position]["table"] = json.loads(json.dumps(ev.payload["table"]))
    return [sections[i] for i in sorted(sections)]
