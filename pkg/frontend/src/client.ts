// Thin typed client for the operator API: snapshot fetches, profile
// start/abort, and the text/event-stream telemetry push.

import { StateSnapshot } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

type FetchLike = typeof fetch;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch,
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async getState(): Promise<StateSnapshot> {
    const resp = await this.fetchImpl(this.url("/state"));
    if (!resp.ok) {
      throw new ApiError(resp.status, `GET /state -> ${resp.status}`);
    }
    return (await resp.json()) as StateSnapshot;
  }

  // Starts a profile; 400/409 error bodies are surfaced verbatim.
  async startProfile(profile: Record<string, unknown>): Promise<Record<string, unknown>> {
    const resp = await this.fetchImpl(this.url("/profile"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(profile),
    });
    const body = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) {
      throw new ApiError(resp.status, String(body.error ?? resp.status));
    }
    return body;
  }

  async abort(): Promise<Record<string, unknown>> {
    const resp = await this.fetchImpl(this.url("/abort"), { method: "POST" });
    const body = (await resp.json()) as Record<string, unknown>;
    if (!resp.ok) {
      throw new ApiError(resp.status, String(body.error ?? resp.status));
    }
    return body;
  }

  // Consumes the SSE telemetry stream until it ends or the signal aborts.
  // Resolves normally on a clean end of stream; rejects on transport errors
  // so the caller can fall back to polling.
  async streamTelemetry(
    onSnapshot: (snap: StateSnapshot) => void,
    signal?: AbortSignal,
  ): Promise<void> {
    const resp = await this.fetchImpl(this.url("/telemetry"), { signal });
    if (!resp.ok || resp.body === null) {
      throw new ApiError(resp.status, `GET /telemetry -> ${resp.status}`);
    }
    const reader = resp.body.getReader();
    const decoder = new TextDecoder();
    let buffer = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done) {
        return;
      }
      buffer += decoder.decode(value, { stream: true });
      let cut;
      while ((cut = buffer.indexOf("\n\n")) >= 0) {
        const block = buffer.slice(0, cut);
        buffer = buffer.slice(cut + 2);
        if (block.startsWith("data: ")) {
          onSnapshot(JSON.parse(block.slice(6)) as StateSnapshot);
        }
      }
    }
  }
}
