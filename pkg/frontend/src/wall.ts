// Wall geometry and heatmap mapping: 15 modules tile 5 wide x 3 high, each
// module 3x3 fans row-major, matching the controller's fan indexing.

import {
  FAN_GRID,
  MODULE_COLS,
  NUM_FANS,
  RPM_SCALE_MAX,
  StateSnapshot,
  Tile,
  WallView,
} from "./types.js";

export function tilePosition(globalIndex: number): { row: number; col: number } {
  const module = Math.floor(globalIndex / 9);
  const fan = globalIndex % 9;
  const mCol = module % MODULE_COLS;
  const mRow = Math.floor(module / MODULE_COLS);
  return {
    row: mRow * FAN_GRID + Math.floor(fan / FAN_GRID),
    col: mCol * FAN_GRID + (fan % FAN_GRID),
  };
}

export function toWallView(snapshot: StateSnapshot): WallView {
  const tiles: Tile[] = [];
  for (let i = 0; i < NUM_FANS; i++) {
    const module = Math.floor(i / 9);
    const { row, col } = tilePosition(i);
    tiles.push({
      module,
      fan: i % 9,
      globalIndex: i,
      row,
      col,
      duty: snapshot.duty[i] ?? 0,
      rpm: snapshot.rpm[i] ?? 0,
      stale: snapshot.stale[module] ?? true,
    });
  }
  tiles.sort((a, b) => a.row - b.row || a.col - b.col);
  return {
    tiles,
    rows: 9,
    cols: 15,
    lostTotal: snapshot.lost.reduce((s, n) => s + n, 0),
    staleModules: snapshot.stale.flatMap((s, m) => (s ? [m] : [])),
  };
}

// Fixed 0..3600 RPM color scale (dark blue -> warm) so operators can compare
// runs visually; duty is shown as text, rpm as fill.
export function rpmColor(rpm: number): string {
  const f = Math.max(0, Math.min(1, rpm / RPM_SCALE_MAX));
  const hue = 240 - 240 * f; // blue at rest, red at full speed
  const light = 18 + 37 * f;
  return `hsl(${hue.toFixed(0)}, 85%, ${light.toFixed(0)}%)`;
}
