/** Slice viewer state: current slice, with depth discovered lazily.
 *
 * The server does not advertise slice counts; requesting one past the end
 * returns 404. The viewer walks freely until a load fails, then remembers
 * the last good index as the ceiling.
 */

import { sliceUrl } from "./api.js";

export class SliceViewer {
  current = 0;
  private maxKnown: number | null = null;

  constructor(public readonly vid: string, startAt = 0) {
    this.current = Math.max(0, startAt);
  }

  get ceiling(): number | null {
    return this.maxKnown;
  }

  url(): string {
    return sliceUrl(this.vid, this.current);
  }

  next(): number {
    const n = this.current + 1;
    if (this.maxKnown === null || n <= this.maxKnown) this.current = n;
    return this.current;
  }

  prev(): number {
    this.current = Math.max(0, this.current - 1);
    return this.current;
  }

  /** Jump by a page of slices (shift+arrow). */
  jump(delta: number): number {
    let n = this.current + delta;
    n = Math.max(0, n);
    if (this.maxKnown !== null) n = Math.min(n, this.maxKnown);
    this.current = n;
    return this.current;
  }

  /** Slice k failed to load: k-1 is the last slice that can exist. */
  loadFailed(k: number): number {
    if (k <= 0) return this.current; // volume unreadable; stay put
    this.maxKnown = Math.min(this.maxKnown ?? k - 1, k - 1);
    if (this.current > this.maxKnown) this.current = this.maxKnown;
    return this.current;
  }
}

/** Move a gallery selection by delta, clamped to [0, total). */
export function moveSelection(current: number, delta: number, total: number): number {
  if (total <= 0) return 0;
  return Math.min(total - 1, Math.max(0, current + delta));
}
