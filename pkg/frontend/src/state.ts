/** View state and the pure reducer over progress events.
 *
 * Rendering is a pure function of this state, and the state (modulo
 * interactive bits like expansion and drafts) is a pure function of the
 * event log, which is what makes replaying a stored log reproduce the
 * same report structure. A gap or reordering in `seq` raises the stream
 * error banner and asks the app loop for a report backfill.
 */

import type {
  CitationJson,
  ProgressEvent,
  ReportJson,
  SectionJson,
  TableCell,
  TableJson,
} from "./types.js";

export interface SectionView {
  collapsed: boolean;
  section: SectionJson;
}

export type CardView =
  | { source: "citation"; marker: string; ref: CitationJson }
  | { source: "cell"; paperId: string; column: string; cell: TableCell };

export interface FeedbackDraft {
  polarity: "up" | "down" | null;
  text: string;
  status: "idle" | "pending" | "sent" | "failed";
}

export interface ViewState {
  reportId: string | null;
  query: string;
  phase: string;
  progress: string[];
  warnings: string[];
  sections: SectionView[];
  blockedReason: string | null;
  errorMessage: string | null;
  streamError: string | null;
  needsBackfill: boolean;
  nextSeq: number;
  done: boolean;
  activeCard: CardView | null;
  feedback: Record<string, FeedbackDraft>;
  toast: string | null;
}

export function initialState(): ViewState {
  return {
    reportId: null,
    query: "",
    phase: "idle",
    progress: [],
    warnings: [],
    sections: [],
    blockedReason: null,
    errorMessage: null,
    streamError: null,
    needsBackfill: false,
    nextSeq: 0,
    done: false,
    activeCard: null,
    feedback: {},
    toast: null,
  };
}

function progressLine(event: ProgressEvent): string | null {
  const p = event.payload as Record<string, any>;
  switch (event.kind) {
    case "accepted":
      return "query accepted";
    case "decomposed":
      return "query decomposed for both search arms";
    case "retrieved":
      return `retrieved ${p.n_snippets} snippets + ${p.n_abstracts} abstracts`;
    case "reranked":
      return `reranked, keeping top ${p.k}`;
    case "quotes_extracted":
      return `extracted ${p.n_quotes} quotes from ${p.n_papers} papers`;
    case "outline":
      return `planned ${(p.sections as unknown[]).length} sections` + (p.fallback ? " (fallback)" : "");
    case "section":
      return `section ${p.position} ready`;
    case "table":
      return `comparison table for section ${p.position}`;
    case "done":
      return "report complete";
    default:
      return null;
  }
}

/** Apply one progress event; pure (returns a new state). */
export function reduce(state: ViewState, event: ProgressEvent): ViewState {
  let next: ViewState = { ...state, phase: event.kind };
  if (next.reportId === null) next.reportId = event.report_id;

  if (event.seq !== state.nextSeq) {
    next.streamError = `event stream gap: expected seq ${state.nextSeq}, got ${event.seq}`;
    next.needsBackfill = true;
  }
  next.nextSeq = event.seq + 1;

  const line = progressLine(event);
  if (line) next.progress = [...state.progress, line];

  const p = event.payload as Record<string, any>;
  switch (event.kind) {
    case "accepted":
      next.query = String(p.query ?? "");
      break;
    case "blocked":
      next.blockedReason = String(p.reason ?? "query blocked");
      break;
    case "warning":
      next.warnings = [...state.warnings, `${p.stage}: ${p.message}`];
      break;
    case "section": {
      const section = p.section as SectionJson;
      next.sections = [...state.sections, { collapsed: true, section }];
      break;
    }
    case "table": {
      const table = p.table as TableJson;
      next.sections = state.sections.map((view) =>
        view.section.position === table.position
          ? { ...view, section: { ...view.section, table } }
          : view,
      );
      break;
    }
    case "error":
      next.errorMessage = `${p.stage}: ${p.message}`;
      break;
    case "done":
      next.done = true;
      break;
  }
  return next;
}

/** Backfill from GET /report/{id} after a stream problem: rebuild the
 * section list, keeping expansion state for positions already shown. */
export function applyReport(state: ViewState, report: ReportJson): ViewState {
  const collapsedByPosition = new Map(
    state.sections.map((v) => [v.section.position, v.collapsed]),
  );
  return {
    ...state,
    query: report.query || state.query,
    sections: report.sections.map((section) => ({
      collapsed: collapsedByPosition.get(section.position) ?? true,
      section,
    })),
    needsBackfill: false,
  };
}

// --- interactive actions (also pure) ---------------------------------------

export function toggleSection(state: ViewState, position: number): ViewState {
  return {
    ...state,
    sections: state.sections.map((view) =>
      view.section.position === position ? { ...view, collapsed: !view.collapsed } : view,
    ),
  };
}

export function openCitationCard(
  state: ViewState,
  sectionPosition: number,
  marker: string,
): ViewState {
  const view = state.sections.find((v) => v.section.position === sectionPosition);
  const ref = view?.section.citations[marker];
  if (!ref) return state; // marker must already be in the payload
  return { ...state, activeCard: { source: "citation", marker, ref } };
}

export function openCellCard(
  state: ViewState,
  paperId: string,
  column: string,
  cell: TableCell,
): ViewState {
  return { ...state, activeCard: { source: "cell", paperId, column, cell } };
}

export function closeCard(state: ViewState): ViewState {
  return { ...state, activeCard: null };
}

const EMPTY_DRAFT: FeedbackDraft = { polarity: null, text: "", status: "idle" };

export function feedbackDraft(state: ViewState, scopeKey: string): FeedbackDraft {
  return state.feedback[scopeKey] ?? EMPTY_DRAFT;
}

export function setFeedback(
  state: ViewState,
  scopeKey: string,
  draft: Partial<FeedbackDraft>,
): ViewState {
  const merged = { ...feedbackDraft(state, scopeKey), ...draft };
  return { ...state, feedback: { ...state.feedback, [scopeKey]: merged } };
}

export function setToast(state: ViewState, toast: string | null): ViewState {
  return { ...state, toast };
}

/** "report" | "section:2" | "table:1" -> feedback POST body fields. */
export function scopeKeyToPayload(scopeKey: string): { scope: "report" | "section" | "table"; position?: number } {
  if (scopeKey === "report") return { scope: "report" };
  const [scope, pos] = scopeKey.split(":");
  if ((scope === "section" || scope === "table") && pos !== undefined) {
    return { scope, position: Number(pos) };
  }
  throw new Error(`malformed feedback scope key: ${scopeKey}`);
}

/** Count of distinct cited sources shown on a collapsed section header;
 * model-memory citations are not sources. */
export function citationCount(section: SectionJson): number {
  return Object.values(section.citations).filter((c) => c.kind !== "memory").length;
}
