/** Typed client for the review server's JSON API. */

export type Label = "artifact" | "normal";

export interface VolumeRow {
  id: string;
  subject_id: string;
  p_artifact: number | null;
  decision: Label | null;
  label: Label | null;
  override: Label | null;
  effective_label: Label | null;
}

export interface VolumePage {
  total: number;
  page: number;
  page_size: number;
  threshold: number;
  volumes: VolumeRow[];
}

export interface MetricsDict {
  tp: number;
  fp: number;
  fn: number;
  tn: number;
  precision: number | null;
  recall: number | null;
  accuracy: number | null;
}

export interface MetricsResponse {
  threshold: number;
  metrics: MetricsDict;
  flagged: number;
  total: number;
}

export interface SweepPoint {
  threshold: number;
  precision: number | null;
  recall: number | null;
  accuracy: number | null;
  flagged: number;
}

export interface ExportResult {
  path: string;
  count: number;
}

export type SortOrder = "prob_desc" | "prob_asc" | "id";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function request<T>(path: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(path, init);
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: unknown };
      if (typeof body.detail === "string") detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export function listVolumes(opts: {
  sort?: SortOrder;
  page?: number;
  pageSize?: number;
  threshold?: number;
} = {}): Promise<VolumePage> {
  const q = new URLSearchParams();
  if (opts.sort !== undefined) q.set("sort", opts.sort);
  if (opts.page !== undefined) q.set("page", String(opts.page));
  if (opts.pageSize !== undefined) q.set("page_size", String(opts.pageSize));
  if (opts.threshold !== undefined) q.set("threshold", String(opts.threshold));
  const qs = q.toString();
  return request<VolumePage>(`/api/volumes${qs ? "?" + qs : ""}`);
}

export function getMetrics(threshold?: number): Promise<MetricsResponse> {
  const qs = threshold === undefined ? "" : `?threshold=${threshold}`;
  return request<MetricsResponse>(`/api/metrics${qs}`);
}

export function getSweep(): Promise<{ points: SweepPoint[] }> {
  return request<{ points: SweepPoint[] }>("/api/sweep");
}

export function setLabel(vid: string, label: Label): Promise<{ id: string; override: Label }> {
  return request(`/api/volumes/${encodeURIComponent(vid)}/label`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ label }),
  });
}

export function clearLabel(vid: string): Promise<{ id: string; override: null }> {
  return request(`/api/volumes/${encodeURIComponent(vid)}/label`, {
    method: "DELETE",
  });
}

export function exportFinetuneSet(opts: {
  fraction?: number;
  includeOverrides?: boolean;
  seed?: number;
  path?: string;
} = {}): Promise<ExportResult> {
  const body: Record<string, unknown> = {};
  if (opts.fraction !== undefined) body.fraction = opts.fraction;
  if (opts.includeOverrides !== undefined) body.include_overrides = opts.includeOverrides;
  if (opts.seed !== undefined) body.seed = opts.seed;
  if (opts.path !== undefined) body.path = opts.path;
  return request<ExportResult>("/api/finetune-set/export", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
}

export function sliceUrl(vid: string, k: number): string {
  return `/api/volumes/${encodeURIComponent(vid)}/slices/${k}.png`;
}
