import { readNdjson } from "./ndjson.js";
import type { FeedbackPayload, ProgressEvent, ReportJson } from "./types.js";

/** Thin client for the service wire contract; no extra endpoints. */
export interface Api {
  streamQuery(q: string, onEvent: (event: ProgressEvent) => void): Promise<void>;
  getReport(reportId: string): Promise<ReportJson>;
  postFeedback(payload: FeedbackPayload): Promise<void>;
}

export function createApi(base = ""): Api {
  return {
    async streamQuery(q, onEvent) {
      const res = await fetch(`${base}/query`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ q }),
      });
      if (!res.ok || !res.body) {
        throw new Error(`query failed with status ${res.status}`);
      }
      for await (const obj of readNdjson(res.body)) {
        onEvent(obj as ProgressEvent);
      }
    },

    async getReport(reportId) {
      const res = await fetch(`${base}/report/${reportId}`);
      if (!res.ok) throw new Error(`report fetch failed with status ${res.status}`);
      return (await res.json()) as ReportJson;
    },

    async postFeedback(payload) {
      const res = await fetch(`${base}/feedback`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(payload),
      });
      if (!res.ok) throw new Error(`feedback failed with status ${res.status}`);
    },
  };
}
