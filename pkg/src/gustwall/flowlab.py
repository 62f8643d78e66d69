"""Sensing-grid analysis: ingest 15-sensor anemometer logs, calibrate,
de-offset, low-pass at 50 Hz, and reduce to per-point statistics, flow maps
and RPM->speed tables.

The grid is 15 sensors on a 5-column x 3-row lattice spanning the
1.2 x 0.75 m plane, numbered row-major 1..15.  Sensors 1,5,6,10,11,15 sit on
the flow-envelope boundary; 7,8,9 face the core.

Logs are long-format CSV (timestamp_s, sensor_id, value) with a JSON sidecar
carrying sample rate, units, the wall RPM during capture and the quiescent
(zero wind) window used for offset removal.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter, lfilter_zi

from .calib import CALIB_HEADER, CalibrationCurve

SENSOR_COUNT = 15
BOUNDARY_SENSORS = frozenset({1, 5, 6, 10, 11, 15})
CORE_SENSORS = (7, 8, 9)
TI_MEAN_FLOOR = 0.05  # m/s; below this std/mean is meaningless noise


class FlowError(Exception):
    pass


class MissingQuiescent(FlowError):
    pass


class NyquistViolation(FlowError):
    pass


class IncompleteGrid(FlowError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing sensors: {self.missing}")


class InputDataError(FlowError):
    pass


@dataclass
class SensorTimeSeries:
    sensor_id: int
    sample_rate: float
    samples: np.ndarray
    start_time: float = 0.0
    units: str = "m/s"
    rpm_setting: float | None = None


@dataclass(frozen=True)
class GridLayout:
    """Sensor lattice over the test plane; row-major numbering 1..15."""

    width: float = 1.2
    height: float = 0.75
    cols: int = 5
    rows: int = 3

    def position(self, sensor_id: int) -> tuple[float, float]:
        if not 1 <= sensor_id <= self.cols * self.rows:
            raise ValueError(f"sensor_id {sensor_id} not in 1..{self.cols * self.rows}")
        idx = sensor_id - 1
        return (idx % self.cols) * self.width / (self.cols - 1), \
               (idx // self.cols) * self.height / (self.rows - 1)

    def positions(self) -> dict[int, tuple[float, float]]:
        return {s: self.position(s) for s in range(1, self.cols * self.rows + 1)}


@dataclass(frozen=True)
class FlowStats:
    mean: float
    std: float
    ti: float          # nan when undefined
    ti_defined: bool


@dataclass
class FlowMap:
    xs: np.ndarray          # raster x coordinates
    ys: np.ndarray          # raster y coordinates
    speed: np.ndarray       # shape (len(ys), len(xs))
    grid_means: dict[int, float]
    rpm_setting: float | None = None
    layout: GridLayout | None = None

    def value_at(self, x: float, y: float) -> float:
        """Bilinear value of the underlying lattice at an arbitrary point
        (nearest-edge beyond it); exact at sensor nodes."""
        layout = self.layout or GridLayout()
        z = _lattice_array(self.grid_means, layout)
        fx = _frac_index(np.atleast_1d(float(x)), 0.0, layout.width, layout.cols)
        fy = _frac_index(np.atleast_1d(float(y)), 0.0, layout.height, layout.rows)
        return float(_bilinear(z, fx, fy)[0, 0])


def calibrate(series: SensorTimeSeries, curve: CalibrationCurve) -> SensorTimeSeries:
    """Map raw sensor readings to m/s through the sensor's curve."""
    if series.units == "m/s":
        return series
    return replace(series, samples=np.asarray(curve.eval(series.samples)), units="m/s")


def remove_offset(series: SensorTimeSeries, quiescent_window: tuple[float, float]) -> SensorTimeSeries:
    """Subtract the mean over the zero-wind window (>= 0.5 s of it must be
    inside the capture)."""
    t0, t1 = quiescent_window
    if t1 - t0 < 0.5:
        raise MissingQuiescent(f"quiescent window {t1 - t0:.3f} s < 0.5 s")
    i0 = int(round((t0 - series.start_time) * series.sample_rate))
    i1 = int(round((t1 - series.start_time) * series.sample_rate))
    if i0 < 0 or i1 > len(series.samples) or i1 - i0 < 0.5 * series.sample_rate:
        raise MissingQuiescent(
            f"quiescent window [{t0}, {t1}] not covered by the capture")
    offset = float(np.mean(series.samples[i0:i1]))
    return replace(series, samples=series.samples - offset)


def _butter2_lowpass(cutoff_hz: float, sample_rate: float):
    """Second-order Butterworth low-pass via the bilinear transform;
    -3 dB at cutoff_hz, DC gain 1."""
    k = math.tan(math.pi * cutoff_hz / sample_rate)
    d = 1.0 + math.sqrt(2.0) * k + k * k
    b = np.array([k * k / d, 2.0 * k * k / d, k * k / d])
    a = np.array([1.0, 2.0 * (k * k - 1.0) / d, (1.0 - math.sqrt(2.0) * k + k * k) / d])
    return b, a


def lowpass(series: SensorTimeSeries, cutoff_hz: float = 50.0) -> SensorTimeSeries:
    """Zero-phase low-pass: one 2nd-order Butterworth section applied forward
    then backward (4th-order magnitude, no phase shift).

    Edge handling, so outputs are bit-for-bit reproducible: the series is
    reflect-padded by three filter time constants (3*fs/(2*pi*fc) samples)
    and each pass starts from the DC steady state of its first sample.
    """
    if series.sample_rate <= 2.0 * cutoff_hz:
        raise NyquistViolation(
            f"sample rate {series.sample_rate} Hz <= 2 x {cutoff_hz} Hz cutoff")
    b, a = _butter2_lowpass(cutoff_hz, series.sample_rate)
    pad = int(math.ceil(3.0 * series.sample_rate / (2.0 * math.pi * cutoff_hz)))
    x = np.asarray(series.samples, dtype=float)
    if len(x) < 2:
        return replace(series, samples=x.copy())
    pad = min(pad, len(x) - 1)
    ext = np.concatenate([x[pad:0:-1], x, x[-2:-pad - 2:-1]])
    zi = lfilter_zi(b, a)
    y, _ = lfilter(b, a, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = lfilter(b, a, y, zi=zi * y[0])
    y = y[::-1]
    return replace(series, samples=y[pad:pad + len(x)])


def flow_stats(series: SensorTimeSeries) -> FlowStats:
    """Mean, sample standard deviation and turbulence intensity std/mean.

    TI is flagged undefined below a 0.05 m/s mean, where the ratio would be
    dominated by sensor noise.
    """
    x = np.asarray(series.samples, dtype=float)
    mean = float(np.mean(x))
    std = float(np.std(x, ddof=1)) if len(x) > 1 else 0.0
    if mean < TI_MEAN_FLOOR:
        return FlowStats(mean, std, float("nan"), False)
    return FlowStats(mean, std, std / mean, True)


def _lattice_array(grid_means: dict[int, float], layout: GridLayout) -> np.ndarray:
    return np.array([[grid_means[r * layout.cols + c + 1] for c in range(layout.cols)]
                     for r in range(layout.rows)], dtype=float)


def _frac_index(values: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    """Fractional lattice indices, clamped (nearest-edge extension) and
    snapped onto nodes when within float rounding of one."""
    lattice = np.linspace(lo, hi, n)
    f = np.clip(np.interp(values, lattice, np.arange(n)), 0, n - 1)
    nearest = np.round(f)
    snap = np.abs(f - nearest) < 1e-9
    f[snap] = nearest[snap]
    return f


def _bilinear(z: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    # anchored form (z00 + t*(z01 - z00)) so lattice nodes and uniform
    # lattices reproduce their values exactly
    rows, cols = z.shape
    ix = fx.astype(int)
    iy = fy.astype(int)
    tx = (fx - ix)[None, :]
    ty = (fy - iy)[:, None]
    ixp = np.minimum(ix + 1, cols - 1)[None, :]
    iyp = np.minimum(iy + 1, rows - 1)[:, None]
    iyc, ixc = iy[:, None], ix[None, :]
    top = z[iyc, ixc] + tx * (z[iyc, ixp] - z[iyc, ixc])
    bottom = z[iyp, ixc] + tx * (z[iyp, ixp] - z[iyp, ixc])
    return top + ty * (bottom - top)


def interpolate_flow_map(grid_means: dict[int, float],
                         layout: GridLayout | None = None,
                         resolution: tuple[int, int] = (121, 76),
                         rpm_setting: float | None = None) -> FlowMap:
    """Bilinear interpolation of the 15 time-averaged speeds onto a regular
    raster; exact at the sensor nodes, nearest-edge beyond the lattice."""
    layout = layout or GridLayout()
    missing = set(range(1, SENSOR_COUNT + 1)) - set(grid_means)
    if missing:
        raise IncompleteGrid(missing)
    z = _lattice_array(grid_means, layout)
    nx, ny = resolution
    xs = np.linspace(0.0, layout.width, nx)
    ys = np.linspace(0.0, layout.height, ny)
    fx = _frac_index(xs, 0.0, layout.width, layout.cols)
    fy = _frac_index(ys, 0.0, layout.height, layout.rows)
    speed = _bilinear(z, fx, fy)
    return FlowMap(xs, ys, speed, dict(grid_means), rpm_setting, layout)


def rpm_speed_table(runs: list[tuple[float, dict[int, FlowStats]]]):
    """Reduce grid captures at several RPM settings to (rpm, core speed)
    rows, core speed being the mean over sensors 7, 8, 9.

    Returns (rows, collapsed): rows sorted by RPM; RPM settings that appeared
    more than once are averaged and listed in `collapsed`.
    """
    if len(runs) < 2:
        raise FlowError("need at least two RPM settings")
    by_rpm: dict[float, list[float]] = {}
    for rpm, stats in runs:
        missing = [s for s in CORE_SENSORS if s not in stats]
        if missing:
            raise IncompleteGrid(missing)
        core = float(np.mean([stats[s].mean for s in CORE_SENSORS]))
        by_rpm.setdefault(float(rpm), []).append(core)
    collapsed = sorted(r for r, v in by_rpm.items() if len(v) > 1)
    rows = sorted((r, float(np.mean(v))) for r, v in by_rpm.items())
    return rows, collapsed


# --- file formats ---------------------------------------------------------


def write_sensor_log(path, series_by_id: dict[int, SensorTimeSeries],
                     sidecar_path=None, quiescent: tuple[float, float] | None = None) -> None:
    """Long-format CSV plus JSON sidecar, interleaved by timestamp."""
    path = Path(path)
    rows = []
    for sid, series in series_by_id.items():
        t = series.start_time + np.arange(len(series.samples)) / series.sample_rate
        rows.append(np.column_stack([t, np.full(len(t), sid), series.samples]))
    table = np.concatenate(rows)
    table = table[np.lexsort((table[:, 1], table[:, 0]))]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s", "sensor_id", "value"])
        for t, sid, v in table:
            writer.writerow([f"{t:.6f}", int(sid), f"{v:.6f}"])
    first = next(iter(series_by_id.values()))
    sidecar = {
        "sample_rate_hz": first.sample_rate,
        "units": first.units,
        "rpm_setting": first.rpm_setting,
        "quiescent_window_s": list(quiescent) if quiescent else None,
    }
    sidecar_path = Path(sidecar_path) if sidecar_path else path.with_suffix(".json")
    with open(sidecar_path, "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def read_sensor_log(path, sidecar_path=None):
    """Returns (series_by_id, sidecar dict).  Raises InputDataError with the
    offending line number on malformed rows."""
    path = Path(path)
    sidecar_path = Path(sidecar_path) if sidecar_path else path.with_suffix(".json")
    try:
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputDataError(f"sidecar {sidecar_path}: {exc}") from None
    rate = float(sidecar["sample_rate_hz"])
    by_id: dict[int, list[float]] = {}
    start: dict[int, float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and row and row[0].strip().lower() == "timestamp_s":
                continue
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                t, sid, v = float(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError):
                raise InputDataError(f"{path}: line {lineno}: bad row {row!r}") from None
            if sid not in by_id:
                by_id[sid] = []
                start[sid] = t
            by_id[sid].append(v)
    series = {
        sid: SensorTimeSeries(
            sensor_id=sid, sample_rate=rate,
            samples=np.array(values), start_time=start[sid],
            units=sidecar.get("units", "m/s"),
            rpm_setting=sidecar.get("rpm_setting"),
        )
        for sid, values in by_id.items()
    }
    return series, sidecar


def process_log(path, sidecar_path=None, cutoff_hz: float = 50.0,
                sensor_curves: dict[int, CalibrationCurve] | None = None,
                permissive: bool = False):
    """Full pipeline for one capture: calibrate, de-offset, low-pass, stats.

    Returns (stats_by_id, rpm_setting, warnings).  When a quiescent window
    is present the statistics cover only the samples after it (wind on); TI
    is computed after filtering, a choice the CLI records in the stats CSV
    header.  With permissive=True, per-sensor failures become warnings and
    the sensor is dropped instead of aborting the whole capture.
    """
    series_by_id, sidecar = read_sensor_log(path, sidecar_path)
    window = sidecar.get("quiescent_window_s")
    stats = {}
    warnings = []
    rpm_setting = sidecar.get("rpm_setting")
    for sid, series in sorted(series_by_id.items()):
        try:
            if series.units != "m/s":
                if not sensor_curves or sid not in sensor_curves:
                    raise InputDataError(
                        f"sensor {sid}: raw units but no calibration curve")
                series = calibrate(series, sensor_curves[sid])
            if window is not None:
                series = remove_offset(series, tuple(window))
            series = lowpass(series, cutoff_hz)
            if window is not None:
                cut = int(round((window[1] - series.start_time) * series.sample_rate))
                series = replace(series, samples=series.samples[max(cut, 0):])
            stats[sid] = flow_stats(series)
        except FlowError as exc:
            if not permissive:
                raise
            warnings.append(f"sensor {sid}: {exc}")
    return stats, rpm_setting, warnings


def write_stats_csv(path, stats: dict[int, FlowStats], rpm_setting) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# ti computed on the 50 Hz low-passed series\n")
        writer = csv.writer(fh)
        writer.writerow(["sensor_id", "rpm", "mean", "std", "ti"])
        for sid in sorted(stats):
            s = stats[sid]
            writer.writerow([sid, rpm_setting if rpm_setting is not None else "",
                             f"{s.mean:.6f}", f"{s.std:.6f}",
                             f"{s.ti:.6f}" if s.ti_defined else ""])


def write_flowmap_csv(path, fmap: FlowMap) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "speed"])
        for j, y in enumerate(fmap.ys):
            for i, x in enumerate(fmap.xs):
                writer.writerow([f"{x:.4f}", f"{y:.4f}", f"{fmap.speed[j, i]:.6f}"])


def write_rpm_speed_csv(path, rows) -> None:
    """RPM->speed table in the calibration file format, loadable by calib."""
    with open(path, "w") as fh:
        fh.write(CALIB_HEADER + "\n")
        fh.write("# built by flowlab rpm_speed_table from core sensors 7,8,9\n")
        fh.write("domain,x,y\n")
        for rpm, speed in rows:
            fh.write(f"rpm_to_speed,{rpm!r},{speed!r}\n")
