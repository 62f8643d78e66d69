// Mirrors the operator API schema (docs/operator_api.md in the repo root).

export const MODULE_COUNT = 15;
export const FANS_PER_MODULE = 9;
export const NUM_FANS = MODULE_COUNT * FANS_PER_MODULE;

export const MODULE_COLS = 5;
export const MODULE_ROWS = 3;
export const FAN_GRID = 3; // fans per module edge

export const RPM_SCALE_MAX = 3600; // fixed heatmap scale so runs compare

export interface StateSnapshot {
  seq: number;
  running: boolean;
  t: number;
  phase: number;
  profile: Record<string, unknown> | null;
  profile_desc: string | null;
  duty: number[]; // 135, fan-major
  rpm: number[]; // 135
  stale: boolean[]; // 15 per module
  lost: number[]; // 15 per module
  center_speed_mps: number; // server-side estimate, center module mean RPM
}

export interface ProfileForm {
  kind: "steady" | "square" | "sine";
  lo: number; // m/s
  hi: number; // m/s
  frequency?: number; // Hz, periodic kinds
  duration: number; // s
}

export interface Tile {
  module: number;
  fan: number;
  globalIndex: number;
  row: number; // 0..8 over the whole wall
  col: number; // 0..14
  duty: number;
  rpm: number;
  stale: boolean;
}

export interface WallView {
  tiles: Tile[]; // 135, ordered row-major over the wall
  rows: number;
  cols: number;
  lostTotal: number;
  staleModules: number[];
}

export type ConnectionState = "connecting" | "live" | "polling" | "disconnected";
