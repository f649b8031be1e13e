/** Geometry for the precision-recall chart, kept free of canvas calls. */

import type { SweepPoint } from "./api.js";

export interface XY {
  x: number;
  y: number;
  threshold: number;
}

/** Map sweep points with defined precision and recall into pixel space.
 *
 * Recall runs left to right, precision bottom to top; `pad` pixels of
 * margin on every side. Points where either value is undefined (nothing
 * flagged, or no positives) are skipped.
 */
export function prPolyline(
  points: SweepPoint[],
  width: number,
  height: number,
  pad = 24,
): XY[] {
  const out: XY[] = [];
  const spanX = width - 2 * pad;
  const spanY = height - 2 * pad;
  for (const p of points) {
    if (p.precision === null || p.recall === null) continue;
    out.push({
      x: pad + p.recall * spanX,
      y: height - pad - p.precision * spanY,
      threshold: p.threshold,
    });
  }
  return out;
}

/** The sweep point governing threshold t: largest threshold <= t. */
export function activePoint(points: SweepPoint[], t: number): SweepPoint | null {
  let best: SweepPoint | null = null;
  for (const p of points) {
    if (p.threshold <= t && (best === null || p.threshold > best.threshold)) {
      best = p;
    }
  }
  return best ?? (points.length > 0 ? points[0] : null);
}

export function formatRatio(v: number | null): string {
  return v === null ? "-" : v.toFixed(3);
}
