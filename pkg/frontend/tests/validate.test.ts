import { describe, expect, test } from "vitest";

import { validateProfile } from "../src/validate.js";

describe("profile form validation", () => {
  test("valid square builds speed-unit profile JSON", () => {
    const result = validateProfile({
      kind: "square", lo: 1.3, hi: 3.4, frequency: 0.25, duration: 48,
    });
    expect(result.ok).toBe(true);
    expect(result.profile).toEqual({
      kind: "square", unit: "speed", lo: 1.3, hi: 3.4,
      frequency: 0.25, duration: 48,
    });
  });

  test("frequency 0 rejected client-side", () => {
    const result = validateProfile({
      kind: "square", lo: 1.3, hi: 3.4, frequency: 0, duration: 10,
    });
    expect(result.ok).toBe(false);
    expect(result.errors.join(" ")).toMatch(/frequency/);
  });

  test("lo above hi rejected for periodic kinds", () => {
    const result = validateProfile({
      kind: "sine", lo: 3.4, hi: 1.3, frequency: 0.5, duration: 10,
    });
    expect(result.ok).toBe(false);
    expect(result.errors.join(" ")).toMatch(/lo <= hi/);
  });

  test("steady ignores frequency and lo/hi order", () => {
    const result = validateProfile({
      kind: "steady", lo: 0, hi: 3.4, duration: 50,
    });
    expect(result.ok).toBe(true);
    expect(result.profile).not.toHaveProperty("frequency");
  });

  test("non-positive duration rejected", () => {
    const result = validateProfile({
      kind: "steady", lo: 0, hi: 2, duration: 0,
    });
    expect(result.ok).toBe(false);
  });

  test("negative speeds rejected", () => {
    const result = validateProfile({
      kind: "steady", lo: -1, hi: 2, duration: 5,
    });
    expect(result.ok).toBe(false);
  });
});
