/** DOM rendering: a pure projection of ViewState into elements.
 *
 * Sections stream in collapsed, showing title, TLDR, and cited-source
 * count; clicking the header expands the body. Inline markers and table
 * evidence icons open the same popup card, fed entirely from data already
 * in the report payload (no network on click).
 */

import { renderBody } from "./markdown.js";
import {
  citationCount,
  feedbackDraft,
  type CardView,
  type SectionView,
  type ViewState,
} from "./state.js";
import type { TableCell, TableJson } from "./types.js";

export interface Handlers {
  submit(query: string): void;
  toggleSection(position: number): void;
  openCitation(position: number, marker: string): void;
  openCell(paperId: string, column: string, cell: TableCell): void;
  closeCard(): void;
  thumb(scopeKey: string, polarity: "up" | "down"): void;
  editText(scopeKey: string, text: string): void;
  sendText(scopeKey: string): void;
}

export function render(doc: Document, state: ViewState, handlers: Handlers): HTMLElement {
  const root = doc.createElement("div");
  root.className = "app";
  root.appendChild(renderQueryForm(doc, state, handlers));
  root.appendChild(renderStatus(doc, state));
  if (state.blockedReason) {
    root.appendChild(banner(doc, "blocked-banner", `Query blocked: ${state.blockedReason}`));
  }
  if (state.streamError) {
    root.appendChild(
      banner(doc, "stream-error", `${state.streamError} — refreshed from the stored report`),
    );
  }
  if (state.errorMessage) {
    root.appendChild(banner(doc, "error-banner", `Pipeline error at ${state.errorMessage}`));
  }
  if (state.toast) {
    root.appendChild(banner(doc, "toast", state.toast));
  }
  const report = doc.createElement("main");
  report.className = "report";
  for (const view of state.sections) {
    report.appendChild(renderSection(doc, view, state, handlers));
  }
  root.appendChild(report);
  if (state.done && state.sections.length) {
    const bar = renderFeedback(doc, state, "report", handlers);
    bar.prepend(label(doc, "Rate this report"));
    root.appendChild(bar);
  }
  if (state.activeCard) {
    root.appendChild(renderCard(doc, state.activeCard, handlers));
  }
  return root;
}

function label(doc: Document, text: string): HTMLElement {
  const span = doc.createElement("span");
  span.className = "feedback-label";
  span.textContent = text;
  return span;
}

function banner(doc: Document, className: string, text: string): HTMLElement {
  const div = doc.createElement("div");
  div.className = `banner ${className}`;
  div.textContent = text;
  return div;
}

function renderQueryForm(doc: Document, state: ViewState, handlers: Handlers): HTMLElement {
  const form = doc.createElement("form");
  form.className = "query-form";
  const input = doc.createElement("input");
  input.type = "text";
  input.id = "query-input";
  input.placeholder = "Ask a research question…";
  input.value = state.query;
  const button = doc.createElement("button");
  button.type = "submit";
  button.id = "query-submit";
  button.textContent = "Ask";
  form.append(input, button);
  form.addEventListener("submit", (e) => {
    e.preventDefault();
    if (input.value.trim()) handlers.submit(input.value.trim());
  });
  return form;
}

function renderStatus(doc: Document, state: ViewState): HTMLElement {
  const status = doc.createElement("aside");
  status.className = "status";
  const phase = doc.createElement("div");
  phase.className = "phase";
  phase.textContent = state.phase === "idle" ? "" : `stage: ${state.phase}`;
  status.appendChild(phase);
  const list = doc.createElement("ul");
  list.className = "progress";
  for (const line of state.progress) {
    const item = doc.createElement("li");
    item.className = "progress-line";
    item.textContent = line;
    list.appendChild(item);
  }
  status.appendChild(list);
  for (const warning of state.warnings) {
    const div = doc.createElement("div");
    div.className = "warning";
    div.textContent = `warning — ${warning}`;
    status.appendChild(div);
  }
  return status;
}

function renderSection(
  doc: Document,
  view: SectionView,
  state: ViewState,
  handlers: Handlers,
): HTMLElement {
  const { section } = view;
  const card = doc.createElement("article");
  card.className = view.collapsed ? "section-card collapsed" : "section-card expanded";
  card.dataset.position = String(section.position);

  const header = doc.createElement("div");
  header.className = "section-header";
  const chevron = doc.createElement("span");
  chevron.className = "chevron";
  chevron.textContent = view.collapsed ? "▸" : "▾";
  const title = doc.createElement("h3");
  title.className = "section-title";
  title.textContent = section.title;
  const tldr = doc.createElement("p");
  tldr.className = "tldr";
  tldr.textContent = section.tldr;
  const count = doc.createElement("span");
  count.className = "citation-count";
  const n = citationCount(section);
  count.textContent = n === 1 ? "1 source" : `${n} sources`;
  header.append(chevron, title, count, tldr);
  header.addEventListener("click", () => handlers.toggleSection(section.position));
  card.appendChild(header);

  if (!view.collapsed) {
    card.appendChild(
      renderBody(doc, section.body, (marker) => handlers.openCitation(section.position, marker)),
    );
    if (section.table) {
      card.appendChild(renderTable(doc, section.table, handlers));
      const tableBar = renderFeedback(doc, state, `table:${section.position}`, handlers);
      tableBar.prepend(label(doc, "Rate this table"));
      card.appendChild(tableBar);
    }
    const bar = renderFeedback(doc, state, `section:${section.position}`, handlers);
    bar.prepend(label(doc, "Rate this section"));
    card.appendChild(bar);
  }
  return card;
}

function renderTable(doc: Document, table: TableJson, handlers: Handlers): HTMLElement {
  const el = doc.createElement("table");
  el.className = "compare-table";
  const thead = doc.createElement("thead");
  const headRow = doc.createElement("tr");
  const corner = doc.createElement("th");
  corner.textContent = "paper";
  headRow.appendChild(corner);
  for (const column of table.columns) {
    const th = doc.createElement("th");
    th.textContent = column;
    headRow.appendChild(th);
  }
  thead.appendChild(headRow);
  el.appendChild(thead);
  const tbody = doc.createElement("tbody");
  table.rows.forEach((paperId, r) => {
    const tr = doc.createElement("tr");
    const th = doc.createElement("th");
    th.textContent = paperId;
    tr.appendChild(th);
    table.columns.forEach((column, c) => {
      const td = doc.createElement("td");
      const cell = table.cells[r]?.[c] ?? null;
      if (cell === null) {
        td.className = "missing";
        td.textContent = "—";
      } else {
        const span = doc.createElement("span");
        span.textContent = cell.value;
        td.appendChild(span);
        if (cell.evidence) {
          const icon = doc.createElement("button");
          icon.type = "button";
          icon.className = "evidence-icon";
          icon.title = "show supporting excerpt";
          icon.textContent = "❝";
          icon.addEventListener("click", (e) => {
            e.stopPropagation();
            handlers.openCell(paperId, column, cell);
          });
          td.appendChild(icon);
        }
      }
      tr.appendChild(td);
    });
    tbody.appendChild(tr);
  });
  el.appendChild(tbody);
  return el;
}

function renderCard(doc: Document, card: CardView, handlers: Handlers): HTMLElement {
  const overlay = doc.createElement("div");
  overlay.className = "card-overlay";
  overlay.addEventListener("click", () => handlers.closeCard());
  const box = doc.createElement("div");
  box.className = "citation-card";
  box.addEventListener("click", (e) => e.stopPropagation());

  const heading = doc.createElement("h4");
  const excerpt = doc.createElement("blockquote");
  excerpt.className = "card-excerpt";
  if (card.source === "citation") {
    if (card.ref.kind === "memory") {
      box.classList.add("memory-card");
      heading.textContent = "Model memory";
      excerpt.textContent =
        "This claim comes from the model's parameters, not from a retrieved source.";
    } else {
      heading.textContent = card.ref.paper_title || card.ref.paper_id || "source";
      const paperId = doc.createElement("div");
      paperId.className = "card-paper-id";
      paperId.textContent = `${card.ref.kind} from ${card.ref.paper_id ?? "?"} [${card.marker}]`;
      box.appendChild(paperId);
      excerpt.textContent = card.ref.text ?? "";
    }
  } else {
    heading.textContent = `${card.paperId} — ${card.column}`;
    excerpt.textContent = card.cell.evidence ?? card.cell.value;
  }
  const close = doc.createElement("button");
  close.type = "button";
  close.className = "card-close";
  close.textContent = "close";
  close.addEventListener("click", () => handlers.closeCard());
  box.prepend(heading);
  box.append(excerpt, close);
  overlay.appendChild(box);
  return overlay;
}

function renderFeedback(
  doc: Document,
  state: ViewState,
  scopeKey: string,
  handlers: Handlers,
): HTMLElement {
  const draft = feedbackDraft(state, scopeKey);
  const bar = doc.createElement("div");
  bar.className = "feedback";
  bar.dataset.scope = scopeKey;

  const up = doc.createElement("button");
  up.type = "button";
  up.className = draft.polarity === "up" ? "thumb-up active" : "thumb-up";
  up.textContent = "👍";
  up.addEventListener("click", (e) => {
    e.stopPropagation();
    handlers.thumb(scopeKey, "up");
  });
  const down = doc.createElement("button");
  down.type = "button";
  down.className = draft.polarity === "down" ? "thumb-down active" : "thumb-down";
  down.textContent = "👎";
  down.addEventListener("click", (e) => {
    e.stopPropagation();
    handlers.thumb(scopeKey, "down");
  });

  const text = doc.createElement("input");
  text.type = "text";
  text.className = "feedback-text";
  text.placeholder = "tell us more…";
  text.value = draft.text;
  text.addEventListener("click", (e) => e.stopPropagation());
  text.addEventListener("input", () => handlers.editText(scopeKey, text.value));

  const send = doc.createElement("button");
  send.type = "button";
  send.className = "feedback-send";
  send.textContent = "send";
  send.addEventListener("click", (e) => {
    e.stopPropagation();
    handlers.sendText(scopeKey);
  });

  const status = doc.createElement("span");
  status.className = `feedback-status ${draft.status}`;
  status.textContent =
    draft.status === "sent" ? "thanks!" : draft.status === "failed" ? "failed — try again" : "";

  bar.append(up, down, text, send, status);
  return bar;
}
