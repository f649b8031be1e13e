/** Debounced threshold dispatcher with stale-response protection.
 *
 * Slider input events arrive faster than the server should be queried, so
 * values are debounced (150 ms by default). Responses may also return out
 * of order on a slow link; each request carries a sequence number and a
 * response is dropped unless it is newer than the last one applied, so the
 * display can never step backwards to a stale threshold.
 */

export class ThresholdController<T> {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private issued = 0;
  private applied = 0;
  private pending: number | null = null;

  constructor(
    private readonly fetchState: (t: number) => Promise<T>,
    private readonly onUpdate: (state: T, t: number) => void,
    readonly debounceMs: number = 150,
  ) {}

  /** Record a slider value; the fetch fires once input settles. */
  set(t: number): void {
    this.pending = t;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      const value = this.pending;
      this.pending = null;
      if (value !== null) void this.fire(value);
    }, this.debounceMs);
  }

  /** Fetch immediately, skipping the debounce (initial load, override edits). */
  flush(t: number): Promise<void> {
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
      this.pending = null;
    }
    return this.fire(t);
  }

  private async fire(t: number): Promise<void> {
    const seq = ++this.issued;
    let state: T;
    try {
      state = await this.fetchState(t);
    } catch {
      return; // transient fetch failure; a newer slider move will retry
    }
    if (seq > this.applied) {
      this.applied = seq;
      this.onUpdate(state, t);
    }
  }
}
