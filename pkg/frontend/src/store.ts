// One store serializes every update the UI sees: snapshot on connect,
// stream deltas while live, 1 Hz polling as the fallback, and a
// disconnected banner (with retries) when even polling fails.  The console
// keeps no wall state of its own: a reload rebuilds everything from
// GET /state.

import { ApiClient } from "./client.js";
import { ConnectionState, StateSnapshot } from "./types.js";

export interface ConsoleState {
  connection: ConnectionState;
  snapshot: StateSnapshot | null;
  lastError: string | null;
}

type Listener = (state: ConsoleState) => void;

export const POLL_INTERVAL_MS = 1000;
export const RETRY_INTERVAL_MS = 1000;
export const STALE_BANNER_MS = 2000;

export class ConsoleStore {
  private state: ConsoleState = {
    connection: "connecting",
    snapshot: null,
    lastError: null,
  };
  private listeners: Listener[] = [];
  private stopped = false;
  private abortStream: AbortController | null = null;
  private lastUpdateMs = 0;
  private watchdog: ReturnType<typeof setInterval> | null = null;

  constructor(private client: ApiClient) {}

  current(): ConsoleState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(patch: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...patch };
    for (const l of this.listeners) {
      l(this.state);
    }
  }

  private applySnapshot(
    snap: StateSnapshot,
    connection: ConnectionState,
    authoritative = false,
  ): void {
    this.lastUpdateMs = Date.now();
    // stream updates are monotone by seq; a full GET /state is always
    // authoritative (it also resets the baseline after a controller restart)
    if (
      !authoritative &&
      this.state.snapshot !== null &&
      snap.seq < this.state.snapshot.seq
    ) {
      return;
    }
    this.emit({ snapshot: snap, connection, lastError: null });
  }

  // Connect: one snapshot first (the full picture), then live stream with
  // polling fallback.  Safe to call once; runs until stop().
  async connect(): Promise<void> {
    this.watchdog = setInterval(() => {
      if (
        this.state.connection !== "disconnected" &&
        this.lastUpdateMs > 0 &&
        Date.now() - this.lastUpdateMs > STALE_BANNER_MS
      ) {
        this.emit({ connection: "disconnected" });
      }
    }, 250);
    while (!this.stopped) {
      try {
        this.applySnapshot(await this.client.getState(), "live", true);
      } catch (err) {
        this.emit({ connection: "disconnected", lastError: String(err) });
        await sleep(RETRY_INTERVAL_MS);
        continue;
      }
      try {
        this.abortStream = new AbortController();
        await this.client.streamTelemetry(
          (snap) => this.applySnapshot(snap, "live"),
          this.abortStream.signal,
        );
        if (this.stopped) {
          return;
        }
        // an unexpected clean end is stream loss too
        this.emit({ connection: "polling", lastError: "telemetry stream ended" });
      } catch (err) {
        if (this.stopped) {
          return;
        }
        this.emit({ connection: "polling", lastError: String(err) });
      }
      // stream lost: poll at 1 Hz for a while, then try the stream again
      for (let i = 0; i < 5 && !this.stopped; i++) {
        await sleep(POLL_INTERVAL_MS);
        try {
          this.applySnapshot(await this.client.getState(), "polling", true);
        } catch (pollErr) {
          this.emit({ connection: "disconnected", lastError: String(pollErr) });
        }
      }
    }
  }

  stop(): void {
    this.stopped = true;
    this.abortStream?.abort();
    if (this.watchdog !== null) {
      clearInterval(this.watchdog);
    }
  }

  async startProfile(profile: Record<string, unknown>): Promise<void> {
    await this.client.startProfile(profile);
    this.applySnapshot(await this.client.getState(), this.state.connection, true);
  }

  async abort(): Promise<void> {
    await this.client.abort();
    this.applySnapshot(await this.client.getState(), this.state.connection, true);
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
