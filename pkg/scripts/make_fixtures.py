#!/usr/bin/env python3
"""Regenerate the synthetic flight-log fixtures in data/.

The fixtures are modeled on the published text anchors, not on real flight
data (the raw logs are unpublished): the Flapper's power-vs-wind means form
a bell with the minimum 12.7 W at 2.7 m/s on a 7.4 V pack, the CrazyFlie
averages ~8.8 W with a much flatter profile on 3.7 V, and pitch grows with
wind speed (far more steeply for the Flapper).  Deterministic: fixed seed,
fixed formatting, so reruns are byte-identical.

Usage: python scripts/make_fixtures.py [outdir]
"""

import csv
import sys
from pathlib import Path

import numpy as np

WINDS = [0.5, 1.3, 1.9, 2.3, 2.7, 3.4]
RATE_HZ = 20.0
SECONDS_PER_CONDITION = 30.0

FLAPPER = {
    "voltage": 7.4,
    "power_mean": {0.5: 16.5, 1.3: 15.0, 1.9: 14.0, 2.3: 13.2, 2.7: 12.7, 3.4: 13.6},
    "power_std": 0.6,
    "pitch_mean": {0.5: 2.0, 1.3: 8.0, 1.9: 15.0, 2.3: 22.0, 2.7: 30.0, 3.4: 43.0},
    "pitch_std": 3.0,
    "x_wander": 0.25,
}

CRAZYFLIE = {
    "voltage": 3.7,
    "power_mean": {0.5: 8.85, 1.3: 8.78, 1.9: 8.72, 2.3: 8.75, 2.7: 8.81, 3.4: 8.90},
    "power_std": 0.25,
    "pitch_mean": {0.5: 1.0, 1.3: 3.0, 1.9: 5.0, 2.3: 7.0, 2.7: 9.0, 3.4: 12.0},
    "pitch_std": 1.0,
    "x_wander": 0.08,
}

HEADER = ["timestamp_us", "x", "y", "z", "roll", "pitch", "yaw",
          "voltage", "current", "condition"]


def synth_drone(rng, spec):
    n = int(RATE_HZ * SECONDS_PER_CONDITION)
    rows = []
    t_us = 0
    dt_us = int(1e6 / RATE_HZ)
    for wind in WINDS:
        # zero-mean the noise per group so the group means hit the anchors
        pnoise = rng.normal(0.0, spec["power_std"], n)
        pnoise -= pnoise.mean()
        anoise = rng.normal(0.0, spec["pitch_std"], n)
        anoise -= anoise.mean()
        power = spec["power_mean"][wind] + pnoise
        pitch = spec["pitch_mean"][wind] + anoise
        drift = spec["x_wander"] * np.sin(2 * np.pi * 0.1 * np.arange(n) / RATE_HZ)
        for i in range(n):
            volts = spec["voltage"]
            rows.append([
                t_us,
                1.0 + drift[i] + 0.02 * rng.standard_normal(),
                0.05 * rng.standard_normal(),
                1.0 + 0.02 * rng.standard_normal(),
                0.5 * rng.standard_normal(),
                pitch[i],
                1.0 * rng.standard_normal(),
                volts,
                power[i] / volts,
                wind,
            ])
            t_us += dt_us
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:-1]] + [row[-1]])


def synth_gust_run(rng, outdir):
    """A 0.25 Hz gust flight: pitch follows the wind command through a
    0.4 s first-order lag, plus the matching ctl-format events.csv."""
    freq, duration, tau = 0.25, 48.0, 0.4
    dt = 1.0 / RATE_HZ
    n = int(duration * RATE_HZ) + 1
    t = np.arange(n) * dt
    period = 1.0 / freq
    lo_pitch, hi_pitch = 12.0, 40.0
    cmd = np.where((t * freq) % 1.0 < 0.5, lo_pitch, hi_pitch)
    pitch = np.empty(n)
    pitch[0] = lo_pitch
    alpha = 1.0 - np.exp(-dt / tau)
    for i in range(1, n):
        pitch[i] = pitch[i - 1] + (cmd[i] - pitch[i - 1]) * alpha
    pitch += rng.normal(0.0, 0.4, n)

    rows = []
    for i in range(n):
        volts = 7.4
        rows.append([int(t[i] * 1e6),
                     1.0 + 0.1 * np.sin(2 * np.pi * freq * t[i] - 0.6),
                     0.0, 1.0, 0.0, pitch[i], 0.0,
                     volts, (14.0 + 0.02 * pitch[i]) / volts, freq])
    write_csv(outdir / "flapper_gust_0p25hz.csv", rows)

    with open(outdir / "flapper_gust_0p25hz_events.csv", "w") as fh:
        fh.write("timestamp_us,t,old_duty,new_duty,phase\n")
        prev = 0.0
        for tick in np.arange(0, duration + 1e-9, 1.0 / freq / 2.0):
            duty = 0.5 if (tick * freq) % 1.0 < 0.5 else 1.0
            if duty != prev:
                fh.write(f"{int(tick * 1e6)},{tick:.6f},{prev:.6f},{duty:.6f},"
                         f"{2 * np.pi * ((tick * freq) % 1.0):.6f}\n")
                prev = duty


def main():
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else \
        Path(__file__).resolve().parent.parent / "data"
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(20240525)
    write_csv(outdir / "flapper_flight.csv", synth_drone(rng, FLAPPER))
    write_csv(outdir / "crazyflie_flight.csv", synth_drone(rng, CRAZYFLIE))
    synth_gust_run(rng, outdir)
    for name in ("flapper_flight.csv", "crazyflie_flight.csv",
                 "flapper_gust_0p25hz.csv", "flapper_gust_0p25hz_events.csv"):
        print(f"wrote {outdir / name}")


if __name__ == "__main__":
    main()
