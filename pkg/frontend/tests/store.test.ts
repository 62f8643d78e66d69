import { afterEach, beforeEach, describe, expect, test } from "vitest";

import { ApiClient, ApiError } from "../src/client.js";
import { ConsoleStore } from "../src/store.js";
import { toWallView } from "../src/wall.js";
import { MockController, sleep, waitFor } from "./mock_controller.js";

let mock: MockController;
let base: string;
let store: ConsoleStore | null;

beforeEach(async () => {
  mock = new MockController();
  base = await mock.start();
  store = null;
});

afterEach(async () => {
  store?.stop();
  await mock.stop();
});

describe("api client", () => {
  test("getState parses the snapshot", async () => {
    const client = new ApiClient(base);
    const snap = await client.getState();
    expect(snap.running).toBe(false);
    expect(snap.duty).toHaveLength(135);
  });

  test("409 and 400 bodies surface verbatim", async () => {
    const client = new ApiClient(base);
    mock.rejectNextProfile = { code: 409, error: "a profile is already running" };
    await expect(client.startProfile({ kind: "steady" })).rejects.toThrow(
      "a profile is already running",
    );
    mock.rejectNextProfile = { code: 400, error: "kind 'warp' not one of ..." };
    try {
      await client.startProfile({ kind: "warp" });
      expect.unreachable();
    } catch (err) {
      expect((err as ApiError).status).toBe(400);
    }
  });
});

describe("console store", () => {
  test("connect goes live and follows stream updates", async () => {
    store = new ConsoleStore(new ApiClient(base));
    void store.connect();
    await waitFor(() => store!.current().connection === "live", 3000, "live");
    mock.bump({ duty: new Array(135).fill(0.8), running: true });
    await waitFor(
      () => (store!.current().snapshot?.duty[0] ?? 0) === 0.8,
      3000,
      "stream update",
    );
  });

  test("stream loss falls back to 1 Hz polling and still updates", async () => {
    store = new ConsoleStore(new ApiClient(base));
    void store.connect();
    await waitFor(() => store!.current().connection === "live", 3000, "live");
    mock.dropStreams();
    await waitFor(() => store!.current().connection === "polling", 3000, "polling");
    mock.bump({ duty: new Array(135).fill(0.3) });
    await waitFor(
      () => (store!.current().snapshot?.duty[0] ?? 0) === 0.3,
      4000,
      "poll update",
    );
  }, 10000);

  test("controller death shows the banner within 2 s", async () => {
    store = new ConsoleStore(new ApiClient(base));
    void store.connect();
    await waitFor(() => store!.current().connection === "live", 3000, "live");
    await mock.stop();
    const killed = Date.now();
    await waitFor(
      () => store!.current().connection === "disconnected", 3000, "banner",
    );
    expect(Date.now() - killed).toBeLessThanOrEqual(2300);
    mock = new MockController(); // so afterEach has something to stop
    await mock.start();
  }, 10000);

  test("start and abort round-trip through the store", async () => {
    store = new ConsoleStore(new ApiClient(base));
    void store.connect();
    await waitFor(() => store!.current().connection === "live", 3000, "live");
    await store.startProfile({ kind: "square", unit: "speed", lo: 1.3,
                               hi: 3.4, frequency: 0.25, duration: 48 });
    expect(store.current().snapshot?.running).toBe(true);
    expect(store.current().snapshot?.profile_desc).toContain("square");
    await store.abort();
    const snap = store.current().snapshot!;
    expect(snap.running).toBe(false);
    expect(Math.max(...snap.duty)).toBe(0);
  });

  test("a fresh store reconstructs the full view from GET /state alone", async () => {
    mock.bump({
      running: true, profile_desc: "square mock",
      duty: new Array(135).fill(0.7), rpm: new Array(135).fill(2520),
      stale: Object.assign(new Array(15).fill(false), { 3: true }),
    });
    const fresh = new ConsoleStore(new ApiClient(base));
    const snap = await new ApiClient(base).getState();
    const view = toWallView(snap);
    expect(snap.running).toBe(true);
    expect(snap.profile_desc).toBe("square mock");
    expect(view.tiles[0].duty).toBe(0.7);
    expect(view.tiles[0].rpm).toBe(2520);
    expect(view.staleModules).toEqual([3]);
    fresh.stop();
  });
});
