// Client-side profile validation mirroring the controller's invariants, so
// obviously broken forms never hit the wire.  The calibration range check
// stays server-side; its 400 is surfaced verbatim.

import { ProfileForm } from "./types.js";

export interface ValidationResult {
  ok: boolean;
  errors: string[];
  profile?: Record<string, unknown>;
}

const KINDS = ["steady", "square", "sine"];

export function validateProfile(form: ProfileForm): ValidationResult {
  const errors: string[] = [];
  if (!KINDS.includes(form.kind)) {
    errors.push(`kind must be one of ${KINDS.join(", ")}`);
  }
  if (!Number.isFinite(form.duration) || form.duration <= 0) {
    errors.push("duration must be > 0 s");
  }
  if (!Number.isFinite(form.lo) || !Number.isFinite(form.hi)) {
    errors.push("lo and hi must be numbers (m/s)");
  } else {
    if (form.lo < 0 || form.hi < 0) {
      errors.push("wind speeds must be >= 0 m/s");
    }
    if (form.kind !== "steady" && form.lo > form.hi) {
      errors.push("need lo <= hi");
    }
  }
  if (form.kind === "square" || form.kind === "sine") {
    if (!Number.isFinite(form.frequency ?? NaN) || (form.frequency ?? 0) <= 0) {
      errors.push("periodic profiles need frequency > 0 Hz");
    }
  }
  if (errors.length > 0) {
    return { ok: false, errors };
  }
  const profile: Record<string, unknown> = {
    kind: form.kind,
    unit: "speed",
    lo: form.lo,
    hi: form.hi,
    duration: form.duration,
  };
  if (form.kind !== "steady" && form.frequency !== undefined) {
    profile.frequency = form.frequency;
  }
  return { ok: true, errors: [], profile };
}
