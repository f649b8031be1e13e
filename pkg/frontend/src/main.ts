/** Wires the review UI to the server: table, slider, viewer, chart, export. */

import {
  ApiError,
  clearLabel,
  exportFinetuneSet,
  getMetrics,
  getSweep,
  listVolumes,
  setLabel,
  type Label,
  type MetricsResponse,
  type SortOrder,
  type SweepPoint,
  type VolumePage,
  type VolumeRow,
} from "./api.js";
import { activePoint, formatRatio, prPolyline } from "./chart.js";
import { renderMetrics, renderTable } from "./gallery.js";
import { ThresholdController } from "./threshold.js";
import { moveSelection, SliceViewer } from "./viewer.js";

interface ViewState {
  metrics: MetricsResponse | null;
  page: VolumePage;
}

const el = <T extends HTMLElement>(id: string): T => {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
};

let threshold = 0.5;
let sort: SortOrder = "prob_desc";
let page = 0;
const pageSize = 50;
let selectedId: string | null = null;
let currentRows: VolumeRow[] = [];
let viewer: SliceViewer | null = null;
let sweepPoints: SweepPoint[] = [];

const slider = el<HTMLInputElement>("threshold-slider");
const sliderValue = el<HTMLElement>("threshold-value");
const metricsPanel = el<HTMLElement>("metrics");
const tableBody = el<HTMLTableSectionElement>("volume-body");
const pageInfo = el<HTMLElement>("page-info");
const statusLine = el<HTMLElement>("status");
const sliceImg = el<HTMLImageElement>("slice-img");
const sliceInfo = el<HTMLElement>("slice-info");
const chartCanvas = el<HTMLCanvasElement>("pr-chart");

function setStatus(msg: string): void {
  statusLine.textContent = msg;
}

async function fetchState(t: number): Promise<ViewState> {
  const volumes = listVolumes({ sort, page, pageSize, threshold: t });
  let metrics: MetricsResponse | null = null;
  try {
    metrics = await getMetrics(t);
  } catch (err) {
    if (!(err instanceof ApiError && err.status === 409)) throw err;
  }
  return { metrics, page: await volumes };
}

function applyState(state: ViewState, t: number): void {
  threshold = t;
  sliderValue.textContent = t.toFixed(2);
  if (state.metrics) {
    renderMetrics(metricsPanel, state.metrics);
  } else {
    metricsPanel.textContent = "no labels yet - override a volume to see metrics";
  }
  currentRows = state.page.volumes;
  if (selectedId !== null && !currentRows.some((r) => r.id === selectedId)) {
    selectedId = null;
  }
  tableBody.replaceWith(renderBody());
  const pages = Math.max(1, Math.ceil(state.page.total / pageSize));
  pageInfo.textContent = `page ${state.page.page + 1} / ${pages} (${state.page.total} volumes)`;
  drawChart();
}

const controller = new ThresholdController<ViewState>(fetchState, applyState);

function renderBody(): HTMLTableSectionElement {
  const body = renderTable(document, currentRows, selectedId, {
    onSelect: selectRow,
    onOverride: (row, label) => void override(row, label),
    onClearOverride: (row) => void clearOverride(row),
  });
  body.id = "volume-body";
  const old = document.getElementById("volume-body");
  if (old && old !== body) old.replaceWith(body);
  return body;
}

function selectRow(row: VolumeRow): void {
  selectedId = row.id;
  const keep = viewer?.current ?? 0;
  viewer = new SliceViewer(row.id, keep);
  updateSlice();
  renderBody();
}

function updateSlice(): void {
  if (!viewer) return;
  sliceInfo.textContent = `${viewer.vid} - slice ${viewer.current}`;
  sliceImg.src = viewer.url();
  sliceImg.style.visibility = "visible";
}

sliceImg.addEventListener("error", () => {
  if (!viewer) return;
  const before = viewer.current;
  viewer.loadFailed(viewer.current);
  if (viewer.current !== before) {
    updateSlice();
  } else {
    sliceImg.style.visibility = "hidden";
    sliceInfo.textContent = `${viewer.vid} - no readable slices`;
  }
});

async function override(row: VolumeRow, label: Label): Promise<void> {
  try {
    await setLabel(row.id, label);
    setStatus(`override ${row.id} -> ${label}`);
  } catch (err) {
    setStatus(String(err));
    return;
  }
  await Promise.all([controller.flush(threshold), refreshSweep()]);
}

async function clearOverride(row: VolumeRow): Promise<void> {
  try {
    await clearLabel(row.id);
    setStatus(`cleared override on ${row.id}`);
  } catch (err) {
    setStatus(String(err));
    return;
  }
  await Promise.all([controller.flush(threshold), refreshSweep()]);
}

async function refreshSweep(): Promise<void> {
  try {
    sweepPoints = (await getSweep()).points;
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      sweepPoints = [];
    } else {
      setStatus(String(err));
    }
  }
  drawChart();
}

function drawChart(): void {
  const ctx = chartCanvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = chartCanvas;
  ctx.clearRect(0, 0, width, height);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(24, 24, width - 48, height - 48);
  const line = prPolyline(sweepPoints, width, height);
  if (line.length === 0) return;
  ctx.strokeStyle = "#2a7ae2";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  line.forEach((p, i) => (i === 0 ? ctx.moveTo(p.x, p.y) : ctx.lineTo(p.x, p.y)));
  ctx.stroke();
  const active = activePoint(sweepPoints, threshold);
  if (active && active.precision !== null && active.recall !== null) {
    const [pt] = prPolyline([active], width, height);
    ctx.fillStyle = "#e25a2a";
    ctx.beginPath();
    ctx.arc(pt.x, pt.y, 4, 0, 2 * Math.PI);
    ctx.fill();
    const label = `t=${active.threshold.toFixed(2)} P=${formatRatio(active.precision)} R=${formatRatio(active.recall)}`;
    ctx.fillStyle = "#333";
    ctx.fillText(label, 28, 16);
  }
}

function bindControls(): void {
  slider.addEventListener("input", () => {
    const t = Number(slider.value);
    sliderValue.textContent = t.toFixed(2);
    controller.set(t);
  });

  el<HTMLSelectElement>("sort").addEventListener("change", (ev) => {
    sort = (ev.target as HTMLSelectElement).value as SortOrder;
    page = 0;
    void controller.flush(threshold);
  });
  el<HTMLButtonElement>("prev-page").addEventListener("click", () => {
    if (page > 0) {
      page -= 1;
      void controller.flush(threshold);
    }
  });
  el<HTMLButtonElement>("next-page").addEventListener("click", () => {
    page += 1;
    void controller.flush(threshold);
  });

  el<HTMLButtonElement>("slice-prev").addEventListener("click", () => {
    viewer?.prev();
    updateSlice();
  });
  el<HTMLButtonElement>("slice-next").addEventListener("click", () => {
    viewer?.next();
    updateSlice();
  });

  el<HTMLButtonElement>("export-btn").addEventListener("click", () => void runExport());

  document.addEventListener("keydown", (ev) => {
    const target = ev.target as HTMLElement | null;
    if (target && ["INPUT", "SELECT", "TEXTAREA"].includes(target.tagName)) return;
    const step = ev.shiftKey ? 5 : 1;
    switch (ev.key) {
      case "ArrowDown":
      case "j": {
        const idx = currentRows.findIndex((r) => r.id === selectedId);
        const next = moveSelection(idx < 0 ? 0 : idx, idx < 0 ? 0 : 1, currentRows.length);
        if (currentRows[next]) selectRow(currentRows[next]);
        ev.preventDefault();
        break;
      }
      case "ArrowUp":
      case "k": {
        const idx = currentRows.findIndex((r) => r.id === selectedId);
        const next = moveSelection(Math.max(idx, 0), -1, currentRows.length);
        if (currentRows[next]) selectRow(currentRows[next]);
        ev.preventDefault();
        break;
      }
      case "ArrowRight":
        viewer?.jump(step);
        updateSlice();
        ev.preventDefault();
        break;
      case "ArrowLeft":
        viewer?.jump(-step);
        updateSlice();
        ev.preventDefault();
        break;
      case "a":
        if (selectedId) {
          const row = currentRows.find((r) => r.id === selectedId);
          if (row) void override(row, "artifact");
        }
        break;
      case "n":
        if (selectedId) {
          const row = currentRows.find((r) => r.id === selectedId);
          if (row) void override(row, "normal");
        }
        break;
    }
  });
}

async function runExport(): Promise<void> {
  const fractionRaw = el<HTMLInputElement>("export-fraction").value.trim();
  const opts: { fraction?: number } = {};
  if (fractionRaw !== "") opts.fraction = Number(fractionRaw);
  try {
    const result = await exportFinetuneSet(opts);
    el<HTMLElement>("export-result").textContent =
      `wrote ${result.count} records to ${result.path}`;
  } catch (err) {
    el<HTMLElement>("export-result").textContent = String(err);
  }
}

async function init(): Promise<void> {
  slider.value = String(threshold);
  sliderValue.textContent = threshold.toFixed(2);
  bindControls();
  await controller.flush(threshold);
  await refreshSweep();
  if (currentRows.length > 0) selectRow(currentRows[0]);
  setStatus("ready");
}

void init().catch((err) => setStatus(`failed to load: ${err}`));
