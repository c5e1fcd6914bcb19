/** App loop: holds the ViewState, re-renders on change, and carries out
 * the side effects (stream consumption, backfill fetch, feedback posts
 * with optimistic updates and rollback). */

import type { Api } from "./api.js";
import { render, type Handlers } from "./render.js";
import {
  applyReport,
  closeCard,
  feedbackDraft,
  initialState,
  openCellCard,
  openCitationCard,
  reduce,
  scopeKeyToPayload,
  setFeedback,
  setToast,
  toggleSection,
  type ViewState,
} from "./state.js";
import type { ProgressEvent } from "./types.js";

export interface App {
  state(): ViewState;
  handleEvent(event: ProgressEvent): void;
  submit(query: string): Promise<void>;
  handlers: Handlers;
}

export function createApp(root: HTMLElement, api: Api): App {
  const doc = root.ownerDocument;
  let state = initialState();
  let backfilling = false;

  function rerender(): void {
    const next = render(doc, state, handlers);
    root.replaceChildren(next);
  }

  function set(next: ViewState): void {
    state = next;
    rerender();
  }

  async function backfill(): Promise<void> {
    if (backfilling || !state.reportId) return;
    backfilling = true;
    try {
      const report = await api.getReport(state.reportId);
      set(applyReport(state, report));
    } catch (err) {
      set(setToast(state, `could not backfill the report: ${String(err)}`));
    } finally {
      backfilling = false;
    }
  }

  function handleEvent(event: ProgressEvent): void {
    set(reduce(state, event));
    if (state.needsBackfill) void backfill();
  }

  async function submit(query: string): Promise<void> {
    set({ ...initialState(), query, phase: "submitting" });
    try {
      await api.streamQuery(query, handleEvent);
    } catch (err) {
      set(setToast(state, `stream interrupted: ${String(err)}`));
      await backfill();
    }
  }

  function sendFeedback(scopeKey: string, polarity: "up" | "down" | "none", text?: string): void {
    if (!state.reportId) return;
    const before = feedbackDraft(state, scopeKey);
    set(
      setFeedback(state, scopeKey, {
        polarity: polarity === "none" ? before.polarity : polarity,
        status: "pending",
      }),
    );
    const payload = {
      report_id: state.reportId,
      polarity,
      ...(text ? { text } : {}),
      ...scopeKeyToPayload(scopeKey),
    };
    api
      .postFeedback(payload)
      .then(() => {
        set(setFeedback(state, scopeKey, { status: "sent", ...(text ? { text: "" } : {}) }));
      })
      .catch((err) => {
        // Roll the optimistic update back and surface a toast.
        set(
          setToast(
            setFeedback(state, scopeKey, { ...before, status: "failed" }),
            `feedback failed: ${String(err)}`,
          ),
        );
      });
  }

  const handlers: Handlers = {
    submit(query) {
      void submit(query);
    },
    toggleSection(position) {
      set(toggleSection(state, position));
    },
    openCitation(position, marker) {
      set(openCitationCard(state, position, marker));
    },
    openCell(paperId, column, cell) {
      set(openCellCard(state, paperId, column, cell));
    },
    closeCard() {
      set(closeCard(state));
    },
    thumb(scopeKey, polarity) {
      sendFeedback(scopeKey, polarity);
    },
    editText(scopeKey, text) {
      // No re-render here: keeps focus in the input while typing.
      state = setFeedback(state, scopeKey, { text });
    },
    sendText(scopeKey) {
      const draft = feedbackDraft(state, scopeKey);
      if (!draft.text.trim()) {
        set(setToast(state, "write some feedback text first"));
        return;
      }
      sendFeedback(scopeKey, "none", draft.text.trim());
    },
  };

  rerender();
  return {
    state: () => state,
    handleEvent,
    submit,
    handlers,
  };
}
