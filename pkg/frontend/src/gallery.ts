/** DOM builders for the volume table and the metrics readout. */

import type { Label, MetricsResponse, VolumeRow } from "./api.js";
import { formatRatio } from "./chart.js";

export interface RowHandlers {
  onSelect: (row: VolumeRow) => void;
  onOverride: (row: VolumeRow, label: Label) => void;
  onClearOverride: (row: VolumeRow) => void;
}

export function formatProb(p: number | null): string {
  return p === null ? "-" : p.toFixed(3);
}

export function renderRow(
  doc: Document,
  row: VolumeRow,
  selected: boolean,
  handlers: RowHandlers,
): HTMLTableRowElement {
  const tr = doc.createElement("tr");
  tr.dataset.vid = row.id;
  tr.className = row.decision === "artifact" ? "flagged" : "clean";
  if (selected) tr.classList.add("selected");
  if (row.override !== null) tr.classList.add("overridden");

  const cells = [
    row.id,
    row.subject_id,
    formatProb(row.p_artifact),
    row.decision ?? "-",
    row.effective_label ?? "-",
  ];
  for (const text of cells) {
    const td = doc.createElement("td");
    td.textContent = text;
    tr.appendChild(td);
  }

  const actions = doc.createElement("td");
  actions.className = "row-actions";
  const mark = (label: Label, title: string) => {
    const btn = doc.createElement("button");
    btn.textContent = title;
    btn.disabled = row.override === label;
    btn.addEventListener("click", (ev) => {
      ev.stopPropagation();
      handlers.onOverride(row, label);
    });
    actions.appendChild(btn);
  };
  mark("artifact", "artifact");
  mark("normal", "normal");
  const clear = doc.createElement("button");
  clear.textContent = "reset";
  clear.disabled = row.override === null;
  clear.addEventListener("click", (ev) => {
    ev.stopPropagation();
    handlers.onClearOverride(row);
  });
  actions.appendChild(clear);
  tr.appendChild(actions);

  tr.addEventListener("click", () => handlers.onSelect(row));
  return tr;
}

export function renderTable(
  doc: Document,
  rows: VolumeRow[],
  selectedId: string | null,
  handlers: RowHandlers,
): HTMLTableSectionElement {
  const body = doc.createElement("tbody");
  for (const row of rows) {
    body.appendChild(renderRow(doc, row, row.id === selectedId, handlers));
  }
  return body;
}

export function renderMetrics(el: HTMLElement, m: MetricsResponse): void {
  const md = m.metrics;
  el.innerHTML = "";
  const doc = el.ownerDocument;
  const add = (label: string, value: string, cls?: string) => {
    const box = doc.createElement("div");
    box.className = "metric" + (cls ? " " + cls : "");
    const v = doc.createElement("strong");
    v.textContent = value;
    const l = doc.createElement("span");
    l.textContent = label;
    box.append(v, l);
    el.appendChild(box);
  };
  add("flagged", `${m.flagged} / ${m.total}`, "flagged-count");
  add("precision", formatRatio(md.precision));
  add("recall", formatRatio(md.recall));
  add("accuracy", formatRatio(md.accuracy));
  add("tp/fp/fn/tn", `${md.tp}/${md.fp}/${md.fn}/${md.tn}`);
}
