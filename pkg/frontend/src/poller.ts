// Refresh loop: fixed interval, paused while the tab is hidden, deduplicated
// so a slow response never stacks a second request.

export interface PollerDeps {
  setIntervalFn?: typeof setInterval;
  clearIntervalFn?: typeof clearInterval;
  isHidden?: () => boolean;
}

export class Poller {
  private timer: ReturnType<typeof setInterval> | null = null;
  private inFlight = false;
  public ticks = 0;
  public skipped = 0;

  constructor(
    private readonly action: () => Promise<void>,
    private readonly intervalMs = 2000,
    private readonly deps: PollerDeps = {},
  ) {}

  start(): void {
    if (this.timer) return;
    const set = this.deps.setIntervalFn ?? setInterval;
    this.timer = set(() => void this.tick(), this.intervalMs);
    void this.tick();
  }

  stop(): void {
    if (this.timer) {
      (this.deps.clearIntervalFn ?? clearInterval)(this.timer);
      this.timer = null;
    }
  }

  async tick(): Promise<void> {
    const hidden = this.deps.isHidden ?? (() => typeof document !== "undefined" && document.hidden);
    if (this.inFlight || hidden()) {
      this.skipped += 1;
      return;
    }
    this.inFlight = true;
    this.ticks += 1;
    try {
      await this.action();
    } catch {
      // surfaced by the view; the loop keeps going
    } finally {
      this.inFlight = false;
    }
  }
}
