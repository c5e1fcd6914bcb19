/** Markdown-subset rendering of section bodies: paragraphs, bullet lists,
 * and inline bracketed citation markers. Everything goes through
 * textContent, never innerHTML, so bodies cannot inject markup. */

const MARKER_GROUP = /\[([^\[\]]+)\]/g;

export type MarkerHandler = (marker: string) => void;

function renderInline(doc: Document, text: string, onMarker: MarkerHandler): Node[] {
  const nodes: Node[] = [];
  let last = 0;
  for (const match of text.matchAll(MARKER_GROUP)) {
    const start = match.index ?? 0;
    if (start > last) nodes.push(doc.createTextNode(text.slice(last, start)));
    const group = match[1] ?? "";
    const markers = group.split(",").map((m) => m.trim()).filter(Boolean);
    markers.forEach((marker, i) => {
      if (i > 0) nodes.push(doc.createTextNode(" "));
      const button = doc.createElement("button");
      button.type = "button";
      button.className = "marker";
      button.dataset.marker = marker;
      button.textContent = `[${marker}]`;
      button.addEventListener("click", (e) => {
        e.stopPropagation();
        onMarker(marker);
      });
      nodes.push(button);
    });
    last = start + match[0].length;
  }
  if (last < text.length) nodes.push(doc.createTextNode(text.slice(last)));
  return nodes;
}

export function renderBody(doc: Document, body: string, onMarker: MarkerHandler): HTMLElement {
  const container = doc.createElement("div");
  container.className = "section-body";
  let list: HTMLUListElement | null = null;
  for (const rawLine of body.split("\n")) {
    const line = rawLine.trim();
    if (!line) {
      list = null;
      continue;
    }
    if (line.startsWith("- ") || line.startsWith("* ")) {
      if (!list) {
        list = doc.createElement("ul");
        container.appendChild(list);
      }
      const item = doc.createElement("li");
      renderInline(doc, line.slice(2), onMarker).forEach((n) => item.appendChild(n));
      list.appendChild(item);
    } else {
      list = null;
      const para = doc.createElement("p");
      renderInline(doc, line, onMarker).forEach((n) => para.appendChild(n));
      container.appendChild(para);
    }
  }
  return container;
}
