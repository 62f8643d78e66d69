// Browser bootstrap: wires the store to the DOM.  Rendering is a plain
// function of the store state; every number shown comes straight from an
// API field.

import { ApiClient } from "./client.js";
import { ConsoleState, ConsoleStore } from "./store.js";
import { ProfileForm } from "./types.js";
import { validateProfile } from "./validate.js";
import { rpmColor, toWallView } from "./wall.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing #${id}`);
  }
  return node as T;
}

function controllerUrl(): string {
  const fromQuery = new URLSearchParams(location.search).get("controller");
  return fromQuery ?? `http://${location.hostname}:8080`;
}

function renderWall(state: ConsoleState, grid: HTMLElement): void {
  if (state.snapshot === null) {
    return;
  }
  const view = toWallView(state.snapshot);
  if (grid.childElementCount !== view.tiles.length) {
    grid.innerHTML = "";
    for (const tile of view.tiles) {
      const div = document.createElement("div");
      div.className = "tile";
      div.id = `tile-${tile.globalIndex}`;
      grid.appendChild(div);
    }
  }
  for (const tile of view.tiles) {
    const div = el<HTMLDivElement>(`tile-${tile.globalIndex}`);
    div.style.background = rpmColor(tile.rpm);
    div.classList.toggle("stale", tile.stale);
    div.title = `module ${tile.module} fan ${tile.fan}\n` +
      `duty ${(tile.duty * 100).toFixed(1)}%  rpm ${tile.rpm.toFixed(0)}` +
      (tile.stale ? "  (stale)" : "");
    div.textContent = (tile.duty * 100).toFixed(0);
  }
}

function renderStatus(state: ConsoleState): void {
  const banner = el<HTMLDivElement>("banner");
  banner.className = `banner ${state.connection}`;
  banner.textContent =
    state.connection === "live" ? "live" :
    state.connection === "polling" ? "stream lost, polling at 1 Hz" :
    state.connection === "connecting" ? "connecting..." :
    `disconnected, retrying... ${state.lastError ?? ""}`;

  const snap = state.snapshot;
  el<HTMLSpanElement>("profile-chip").textContent =
    snap?.profile_desc ?? "idle";
  el<HTMLSpanElement>("phase").textContent =
    snap === null ? "-" : `t=${snap.t.toFixed(1)}s phase=${snap.phase.toFixed(2)}`;
  if (snap !== null) {
    const view = toWallView(snap);
    el<HTMLSpanElement>("lost").textContent = String(view.lostTotal);
    el<HTMLSpanElement>("stale-modules").textContent =
      view.staleModules.length > 0 ? view.staleModules.join(",") : "none";
    el<HTMLSpanElement>("speed").textContent =
      `${snap.center_speed_mps.toFixed(2)} m/s`;
    el<HTMLButtonElement>("abort").disabled = !snap.running;
  }
}

function readForm(): ProfileForm {
  return {
    kind: el<HTMLSelectElement>("kind").value as ProfileForm["kind"],
    lo: parseFloat(el<HTMLInputElement>("lo").value),
    hi: parseFloat(el<HTMLInputElement>("hi").value),
    frequency: parseFloat(el<HTMLInputElement>("frequency").value) || undefined,
    duration: parseFloat(el<HTMLInputElement>("duration").value),
  };
}

function main(): void {
  const client = new ApiClient(controllerUrl());
  const store = new ConsoleStore(client);
  const grid = el<HTMLDivElement>("wall");

  store.subscribe((state) => {
    renderWall(state, grid);
    renderStatus(state);
  });

  el<HTMLButtonElement>("start").addEventListener("click", async () => {
    const result = validateProfile(readForm());
    const errors = el<HTMLDivElement>("errors");
    if (!result.ok) {
      errors.textContent = result.errors.join("; ");
      return;
    }
    errors.textContent = "";
    try {
      await store.startProfile(result.profile!);
    } catch (err) {
      errors.textContent = String(err); // 400/409 bodies verbatim
    }
  });

  el<HTMLButtonElement>("abort").addEventListener("click", async () => {
    try {
      await store.abort();
    } catch (err) {
      el<HTMLDivElement>("errors").textContent = String(err);
    }
  });

  void store.connect();
}

main();
