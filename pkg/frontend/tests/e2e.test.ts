// End-to-end: real python emulator + controller API, driven through the
// console client exactly the way the browser UI drives it.  Requires the
// gustwall package to be installed (pip install -e ..).

import { ChildProcess, spawn } from "node:child_process";
import { afterAll, beforeAll, describe, expect, test } from "vitest";

import { ApiClient } from "../src/client.js";
import { ConsoleStore } from "../src/store.js";
import { toWallView } from "../src/wall.js";
import { validateProfile } from "../src/validate.js";
import { sleep, waitFor } from "./mock_controller.js";

const BASE_PORT = 49410;
const API_PORT = 49480;
const BASE = `http://127.0.0.1:${API_PORT}`;

let emulator: ChildProcess;
let controller: ChildProcess;

async function waitForApi(timeoutMs: number): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const resp = await fetch(`${BASE}/state`);
      if (resp.ok) {
        await resp.json();
        return;
      }
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) {
      throw new Error("operator API did not come up");
    }
    await sleep(200);
  }
}

beforeAll(async () => {
  emulator = spawn("gustwall",
    ["emulate", "--base-port", String(BASE_PORT), "--seed", "5",
     "--seconds", "120"],
    { stdio: "ignore" });
  controller = spawn("gustwall",
    ["serve", "--port", String(API_PORT), "--base-port", String(BASE_PORT),
     "--out", "/tmp/gustwall-console-e2e"],
    { stdio: "ignore" });
  await waitForApi(15000);
}, 20000);

afterAll(async () => {
  try {
    await fetch(`${BASE}/abort`, { method: "POST" });
  } catch {
    // already gone
  }
  controller?.kill("SIGTERM");
  emulator?.kill("SIGTERM");
  await sleep(300);
});

describe("console against the real wall", () => {
  test("0.25 Hz gust: tiles alternate with a 2 s half-period, abort zeroes, reload reconstructs", async () => {
    const store = new ConsoleStore(new ApiClient(BASE));
    void store.connect();
    await waitFor(() => store.current().connection === "live", 5000, "live");

    const form = validateProfile({
      kind: "square", lo: 1.3, hi: 3.4, frequency: 0.25, duration: 60,
    });
    expect(form.ok).toBe(true);
    await store.startProfile(form.profile!);
    await waitFor(
      () => (store.current().snapshot?.duty[0] ?? 0) > 0, 3000, "first duty",
    );

    // sample tile 0's commanded duty for ~5.4 s (long enough to see two
    // transitions of the 2 s half-period square)
    const trace: Array<{ ms: number; duty: number }> = [];
    const t0 = Date.now();
    while (Date.now() - t0 < 5400) {
      const snap = store.current().snapshot!;
      trace.push({ ms: Date.now() - t0, duty: toWallView(snap).tiles[0].duty });
      await sleep(50);
    }
    const levels = [...new Set(trace.map((p) => p.duty))].sort((a, b) => a - b);
    expect(levels).toHaveLength(2); // exactly two duty levels (lo and hi)
    const [lo, hi] = levels;
    expect(hi).toBeCloseTo(1.0, 3);  // 3.4 m/s -> full duty
    expect(lo).toBeCloseTo(0.5, 3);  // 1.3 m/s -> half duty
    const edges = trace.filter(
      (p, i) => i > 0 && p.duty !== trace[i - 1].duty,
    );
    expect(edges.length).toBeGreaterThanOrEqual(2);
    for (let i = 1; i < edges.length; i++) {
      const gap = edges[i].ms - edges[i - 1].ms;
      expect(gap).toBeGreaterThan(1600); // 2 s half-period, push latency slack
      expect(gap).toBeLessThan(2400);
    }

    // the wall is actually spinning: measured RPM and centerline speed live
    const running = store.current().snapshot!;
    expect(running.running).toBe(true);
    expect(Math.max(...running.rpm)).toBeGreaterThan(1000);
    expect(running.center_speed_mps).toBeGreaterThan(0.5);

    // full reload: a brand-new client sees the same world from /state alone
    const fresh = await new ApiClient(BASE).getState();
    expect(fresh.running).toBe(true);
    expect(fresh.profile_desc).toBe(running.profile_desc);
    expect(fresh.duty).toHaveLength(135);
    expect([0.5, 1.0]).toContain(Math.max(...fresh.duty));

    // abort: all tiles to duty 0 within one poll interval
    await store.abort();
    const snap = store.current().snapshot!;
    expect(snap.running).toBe(false);
    expect(Math.max(...toWallView(snap).tiles.map((t) => t.duty))).toBe(0);

    store.stop();
  }, 30000);
});
