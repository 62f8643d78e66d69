"""Monotone calibration curves: duty cycle <-> RPM <-> centerline wind speed.

Curves are piecewise-linear with strictly increasing inputs and
non-decreasing outputs, clamped outside the knot range.  That keeps them
trivially invertible wherever they are strictly increasing, which is all an
operator needs to turn "give me 2 m/s" into a duty command.

The default curve set carries only the anchors we trust: duty 0 -> 0 RPM,
duty 1.0 -> 3600 RPM (linear in between, a placeholder until measured), and
centerline speed 1.3 m/s at 1800 RPM / 3.4 m/s at 3600 RPM.  Measured tables
are loaded from CSV files with the header `# gustwall-calib v1` and columns
(domain, x, y).
"""

from __future__ import annotations

import hashlib
import io
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DOMAIN_DUTY_RPM = "duty_to_rpm"
DOMAIN_RPM_SPEED = "rpm_to_speed"

CALIB_HEADER = "# gustwall-calib v1"


class CalibError(Exception):
    pass


class NotInvertible(CalibError):
    """The curve is flat across the requested output value."""


class DegenerateInput(CalibError):
    """Fewer than two distinct abscissae."""


@dataclass(frozen=True)
class CalibrationCurve:
    """Monotone piecewise-linear map with clamping outside the knots."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]
    domain: str = ""

    def __post_init__(self) -> None:
        if len(self.xs) < 2 or len(self.xs) != len(self.ys):
            raise CalibError("need >= 2 (x, y) knots")
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise CalibError("knot inputs must be strictly increasing")
        if any(b < a for a, b in zip(self.ys, self.ys[1:])):
            raise CalibError("knot outputs must be non-decreasing")

    def eval(self, x):
        """Interpolate at x (scalar or array); clamps outside the knot range."""
        return np.interp(x, self.xs, self.ys)

    def eval_inverse(self, y: float) -> float:
        """Inverse on the strictly-increasing restriction, clamped outside.

        Raises NotInvertible when y lands on a flat segment (the preimage
        would be a whole interval).
        """
        ys = self.ys
        if y <= ys[0]:
            if y == ys[0] and len(ys) > 1 and ys[1] == ys[0]:
                raise NotInvertible(f"curve is flat at y={y}")
            return self.xs[0]
        if y >= ys[-1]:
            if y == ys[-1] and ys[-2] == ys[-1]:
                raise NotInvertible(f"curve is flat at y={y}")
            return self.xs[-1]
        i = bisect_right(ys, y) - 1  # ys[i] <= y < ys[i+1]
        if ys[i] == y and i > 0 and ys[i - 1] == y:
            raise NotInvertible(f"curve is flat at y={y}")
        if ys[i] == y:
            return self.xs[i]
        frac = (y - ys[i]) / (ys[i + 1] - ys[i])
        return self.xs[i] + frac * (self.xs[i + 1] - self.xs[i])


def fit_monotone(points: Iterable[tuple[float, float]], domain: str = "") -> CalibrationCurve:
    """Fit a monotone non-decreasing curve through measured (x, y) points.

    Sorts by x (averaging duplicate abscissae) and runs pool-adjacent-
    violators, replacing each decreasing run by its weighted mean.  Fitting
    the output of fit_monotone reproduces it exactly.
    """
    pts = sorted((float(x), float(y)) for x, y in points)
    xs: list[float] = []
    ys: list[float] = []
    counts: list[int] = []
    for x, y in pts:
        if xs and x == xs[-1]:
            counts[-1] += 1
            ys[-1] += (y - ys[-1]) / counts[-1]
        else:
            xs.append(x)
            ys.append(y)
            counts.append(1)
    if len(xs) < 2:
        raise DegenerateInput("need >= 2 distinct x values")

    # pool adjacent violators: blocks of (mean, weight)
    means: list[float] = []
    weights: list[int] = []
    sizes: list[int] = []
    for y, w in zip(ys, counts):
        means.append(y)
        weights.append(w)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            w2 = weights.pop()
            m2 = means.pop()
            n2 = sizes.pop()
            means[-1] = (means[-1] * weights[-1] + m2 * w2) / (weights[-1] + w2)
            weights[-1] += w2
            sizes[-1] += n2
    fitted: list[float] = []
    for m, n in zip(means, sizes):
        fitted.extend([m] * n)
    return CalibrationCurve(tuple(xs), tuple(fitted), domain)


@dataclass(frozen=True)
class DutyResult:
    duty: float
    clamped: bool


@dataclass
class CalibrationSet:
    """The curves a controller needs: duty->RPM and RPM->speed."""

    duty_to_rpm: CalibrationCurve
    rpm_to_speed: CalibrationCurve
    sensors: dict[int, CalibrationCurve] = field(default_factory=dict)

    def rpm_for_duty(self, duty) -> float:
        return self.duty_to_rpm.eval(duty)

    def speed_for_rpm(self, rpm) -> float:
        return self.rpm_to_speed.eval(rpm)

    def speed_for_duty(self, duty) -> float:
        return self.rpm_to_speed.eval(self.duty_to_rpm.eval(duty))

    def speed_to_duty(self, speed: float) -> DutyResult:
        """Duty fraction that produces `speed` m/s at the 1 m centerline.

        Composes the two curve inverses; out-of-range requests are clamped
        to [0, 1] and flagged rather than rejected.
        """
        clamped = False
        if speed <= self.rpm_to_speed.ys[0]:
            clamped = speed < self.rpm_to_speed.ys[0]
            rpm = self.rpm_to_speed.xs[0]
        elif speed >= self.rpm_to_speed.ys[-1]:
            clamped = speed > self.rpm_to_speed.ys[-1]
            rpm = self.rpm_to_speed.xs[-1]
        else:
            rpm = self.rpm_to_speed.eval_inverse(speed)
        duty = self.duty_to_rpm.eval_inverse(rpm)
        if duty < 0.0 or duty > 1.0:
            clamped = True
            duty = min(max(duty, 0.0), 1.0)
        return DutyResult(duty, clamped)


def speed_to_duty(curves: CalibrationSet, speed: float) -> DutyResult:
    return curves.speed_to_duty(speed)


def default_calibration() -> CalibrationSet:
    """Text-anchored default curves; duty->RPM is a linear placeholder."""
    return CalibrationSet(
        duty_to_rpm=CalibrationCurve((0.0, 1.0), (0.0, 3600.0), DOMAIN_DUTY_RPM),
        rpm_to_speed=CalibrationCurve((0.0, 1800.0, 3600.0), (0.0, 1.3, 3.4),
                                      DOMAIN_RPM_SPEED),
    )


def _sensor_domain(sensor_id: int) -> str:
    return f"sensor{sensor_id:02d}_raw_to_speed"


def curves_to_csv(curves: Sequence[CalibrationCurve], comments: Sequence[str] = ()) -> str:
    out = io.StringIO()
    out.write(CALIB_HEADER + "\n")
    for line in comments:
        out.write(f"# {line}\n")
    out.write("domain,x,y\n")
    for curve in curves:
        for x, y in zip(curve.xs, curve.ys):
            out.write(f"{curve.domain},{x!r},{y!r}\n")
    return out.getvalue()


def curves_from_csv(text: str) -> dict[str, CalibrationCurve]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CALIB_HEADER:
        raise CalibError(f"missing calibration header {CALIB_HEADER!r}")
    rows: dict[str, list[tuple[float, float]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#") or line.lower().startswith("domain,"):
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise CalibError(f"line {lineno}: expected domain,x,y")
        try:
            rows.setdefault(parts[0].strip(), []).append((float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise CalibError(f"line {lineno}: {exc}") from None
    curves = {}
    for domain, pts in rows.items():
        pts.sort()
        curves[domain] = CalibrationCurve(tuple(p[0] for p in pts),
                                          tuple(p[1] for p in pts), domain)
    return curves


def save_calibration(path, curves: CalibrationSet) -> None:
    all_curves = [curves.duty_to_rpm, curves.rpm_to_speed]
    all_curves += [curves.sensors[k] for k in sorted(curves.sensors)]
    comments = []
    if curves.duty_to_rpm.xs == (0.0, 1.0) and curves.duty_to_rpm.ys == (0.0, 3600.0):
        comments.append("duty_to_rpm is the linear placeholder, not a measurement")
    with open(path, "w") as fh:
        fh.write(curves_to_csv(all_curves, comments))


def load_calibration(path) -> CalibrationSet:
    with open(path) as fh:
        curves = curves_from_csv(fh.read())
    defaults = default_calibration()
    sensors = {}
    for sid in range(1, 16):
        dom = _sensor_domain(sid)
        if dom in curves:
            sensors[sid] = curves[dom]
    return CalibrationSet(
        duty_to_rpm=curves.get(DOMAIN_DUTY_RPM, defaults.duty_to_rpm),
        rpm_to_speed=curves.get(DOMAIN_RPM_SPEED, defaults.rpm_to_speed),
        sensors=sensors,
    )


def calibration_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]
