"""Injected clocks so emulator and controller dynamics can run off wall time
(live operation) or a manually advanced time base (fast deterministic tests)."""

from __future__ import annotations

import time


class WallClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, dt: float) -> None:
        if dt > 0:
            time.sleep(dt)


class ManualClock:
    """Time advances only when told to; sleep() advances it."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def sleep(self, dt: float) -> None:
        if dt > 0:
            self._t += dt

    def advance(self, dt: float) -> None:
        self._t += dt
