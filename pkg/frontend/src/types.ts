/** Wire types mirroring the service contract (NDJSON events + report JSON). */

export interface ProgressEvent {
  report_id: string;
  seq: number;
  kind: string;
  payload: Record<string, unknown>;
  timestamp: number;
}

export type CitationKind = "quote" | "abstract" | "memory";

export interface CitationJson {
  kind: CitationKind;
  paper_id?: string;
  quote_id?: string;
  text?: string;
  paper_title?: string;
}

export interface TableCell {
  value: string;
  evidence: string | null;
}

export interface TableJson {
  position: number;
  columns: string[];
  rows: string[];
  cells: (TableCell | null)[][];
}

export interface SectionJson {
  position: number;
  title: string;
  tldr: string;
  body: string;
  format: string;
  citations: Record<string, CitationJson>;
  table: TableJson | null;
}

export interface ReportJson {
  report_id?: string;
  query: string;
  sections: SectionJson[];
  diagnostics?: Record<string, unknown>;
}

export interface FeedbackPayload {
  report_id: string;
  scope: "report" | "section" | "table";
  polarity: "up" | "down" | "none";
  position?: number;
  text?: string;
}
