"""Flight-log analytics: power and pitch statistics per wind condition,
smoothing-spline trends, and gust-response analysis aligned on the
controller's sync events.

Flight logs are CSV with columns
timestamp_us,x,y,z,roll,pitch,yaw,voltage,current,condition where
`condition` is the numeric label of the run segment (steady wind speed in
m/s, or gust frequency in Hz).  Sync events come from ctl's events.csv.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLIGHT_COLUMNS = ("timestamp_us", "x", "y", "z", "roll", "pitch", "yaw",
                  "voltage", "current", "condition")


class FlightError(Exception):
    pass


class TooFewSamples(FlightError):
    def __init__(self, groups):
        self.groups = list(groups)
        super().__init__(f"conditions with < 5 samples: {self.groups}")


class DegenerateAbscissae(FlightError):
    pass


class InsufficientPeriods(FlightError):
    pass


class FlatSignal(FlightError):
    pass


class InputDataError(FlightError):
    pass


@dataclass
class FlightLog:
    timestamp_us: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    condition: np.ndarray

    @property
    def t(self) -> np.ndarray:
        """Seconds from the first sample."""
        return (self.timestamp_us - self.timestamp_us[0]) / 1e6

    def field(self, name: str) -> np.ndarray:
        if name == "power":
            return power_series(self)
        if name in FLIGHT_COLUMNS[1:-1]:
            return getattr(self, name)
        raise FlightError(f"unknown field {name!r}")


def load_flight_csv(path) -> FlightLog:
    cols: dict[str, list[float]] = {c: [] for c in FLIGHT_COLUMNS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(FLIGHT_COLUMNS):
            raise InputDataError(f"{path}: expected header {','.join(FLIGHT_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(FLIGHT_COLUMNS):
                raise InputDataError(f"{path}: line {lineno}: expected "
                                     f"{len(FLIGHT_COLUMNS)} fields")
            try:
                for name, value in zip(FLIGHT_COLUMNS, row):
                    cols[name].append(float(value))
            except ValueError:
                raise InputDataError(f"{path}: line {lineno}: bad row {row!r}") from None
    log = FlightLog(**{c: np.array(v) for c, v in cols.items()})
    if len(log.timestamp_us) == 0:
        raise InputDataError(f"{path}: no samples")
    if np.any(np.diff(log.timestamp_us) < 0):
        raise InputDataError(f"{path}: timestamps not monotone")
    if np.any(log.voltage <= 0):
        raise InputDataError(f"{path}: non-positive voltage during flight")
    return log


def power_series(log: FlightLog) -> np.ndarray:
    """Electrical power in watts, the pointwise product V * I (no filtering)."""
    return log.voltage * log.current


@dataclass(frozen=True)
class BoxStats:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    n: int


def box_stats(samples) -> BoxStats:
    x = np.sort(np.asarray(samples, dtype=float))  # sorting makes every stat
    if len(x) < 1:                                 # permutation-invariant
        raise FlightError("empty sample set")
    # type-7 quartiles: linear interpolation between closest order statistics
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    return BoxStats(float(x[0]), float(q1), float(med), float(q3),
                    float(x[-1]), float(np.mean(x)), len(x))


def condition_stats(log: FlightLog, field: str,
                    min_samples: int = 5) -> list[tuple[float, BoxStats]]:
    """BoxStats of a field per condition group, ordered by condition value."""
    values = log.field(field)
    out = []
    too_few = []
    for cond in sorted(set(log.condition.tolist())):
        group = values[log.condition == cond]
        if len(group) < min_samples:
            too_few.append(cond)
            continue
        out.append((float(cond), box_stats(group)))
    if too_few:
        raise TooFewSamples(too_few)
    return out


# --- natural cubic smoothing spline ---------------------------------------


def _spline_matrices(x: np.ndarray):
    """Q (n x n-2) and R (n-2 x n-2) of the natural-spline identity
    Q^T g = R gamma; the roughness penalty is gamma^T R gamma."""
    n = len(x)
    h = np.diff(x)
    q = np.zeros((n, n - 2))
    r = np.zeros((n - 2, n - 2))
    for k in range(n - 2):
        i = k + 1
        q[i - 1, k] = 1.0 / h[i - 1]
        q[i, k] = -1.0 / h[i - 1] - 1.0 / h[i]
        q[i + 1, k] = 1.0 / h[i]
        r[k, k] = (h[i - 1] + h[i]) / 3.0
        if k + 1 < n - 2:
            r[k, k + 1] = r[k + 1, k] = h[i] / 6.0
    return q, r


@dataclass
class SplineFit:
    """Natural cubic smoothing spline: knot values g and second derivatives
    gamma (zero at both ends) minimizing sum (y - g)^2 + lam * integral s''^2."""

    knots: np.ndarray
    values: np.ndarray
    gamma: np.ndarray       # second derivative at every knot, ends zero
    lam: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        x, g, gam = self.knots, self.values, self.gamma
        h = np.diff(x)
        i = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(x) - 2)
        u = t - x[i]
        w = x[i + 1] - t
        hi = h[i]
        inside = (u * w / (6.0 * hi)) * ((hi + w) * gam[i] + (hi + u) * gam[i + 1])
        s = (w * g[i] + u * g[i + 1]) / hi - inside
        # natural spline extends linearly beyond the knots
        left = t < x[0]
        right = t > x[-1]
        if np.any(left):
            slope = (g[1] - g[0]) / h[0] - h[0] * gam[1] / 6.0
            s[left] = g[0] + slope * (t[left] - x[0])
        if np.any(right):
            slope = (g[-1] - g[-2]) / h[-1] + h[-1] * gam[-2] / 6.0
            s[right] = g[-1] + slope * (t[right] - x[-1])
        return float(s[0]) if scalar else s

    def roughness(self) -> float:
        """integral of s''(t)^2 over the knot span."""
        _, r = _spline_matrices(self.knots)
        gi = self.gamma[1:-1]
        return float(gi @ r @ gi)

    def objective(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(np.sum((y - self.values) ** 2) + self.lam * self.roughness())


def smoothing_spline(points, lam: float) -> SplineFit:
    """Fit the penalized least-squares natural cubic spline.

    Solves (R + lam Q^T Q) gamma = Q^T y for the interior second
    derivatives, then g = y - lam Q gamma (Reinsch's scheme).  lam = 0 gives
    the natural interpolating spline; lam -> infinity tends to the ordinary
    least-squares line.  Duplicate abscissae are averaged first.
    """
    if lam < 0:
        raise FlightError("lam must be >= 0")
    pts = sorted((float(px), float(py)) for px, py in points)
    xs: list[float] = []
    ys: list[float] = []
    counts: list[int] = []
    for px, py in pts:
        if xs and px == xs[-1]:
            counts[-1] += 1
            ys[-1] += (py - ys[-1]) / counts[-1]
        else:
            xs.append(px)
            ys.append(py)
            counts.append(1)
    if len(xs) < 4:
        raise DegenerateAbscissae(f"need >= 4 distinct x, got {len(xs)}")
    x = np.array(xs)
    y = np.array(ys)
    q, r = _spline_matrices(x)
    gamma_i = np.linalg.solve(r + lam * (q.T @ q), q.T @ y)
    g = y - lam * (q @ gamma_i)
    gamma = np.zeros(len(x))
    gamma[1:-1] = gamma_i
    return SplineFit(x, g, gamma, lam)


def choose_lambda_loocv(points, grid=None) -> float:
    """Grid-search lam minimizing leave-one-out squared prediction error."""
    pts = [(float(px), float(py)) for px, py in points]
    if grid is None:
        grid = np.logspace(-4, 4, 25)
    best_lam, best_err = float(grid[0]), float("inf")
    for lam in grid:
        err = 0.0
        ok = True
        for i in range(len(pts)):
            rest = pts[:i] + pts[i + 1:]
            try:
                fit = smoothing_spline(rest, lam)
            except DegenerateAbscissae:
                ok = False
                break
            err += (fit(pts[i][0]) - pts[i][1]) ** 2
        if ok and err < best_err:
            best_lam, best_err = float(lam), err
    return best_lam


# --- gust response ---------------------------------------------------------


@dataclass
class PhaseAverage:
    phase: np.ndarray       # bin centers in cycles, [0, 1)
    mean: np.ndarray
    std: np.ndarray
    n_periods: int


def phase_average(t: np.ndarray, values: np.ndarray, event_times,
                  period: float, bins: int = 256) -> PhaseAverage:
    """Fold a periodically forced response into one period.

    Segments start at each rising (lo -> hi) event; each full period inside
    the record is resampled onto a common phase grid by linear interpolation
    and averaged across periods.
    """
    starts = [e for e in event_times if e >= t[0] and e + period <= t[-1] + 1e-9]
    if len(starts) < 2:
        raise InsufficientPeriods(
            f"need >= 2 complete periods, found {len(starts)}")
    grid = np.arange(bins) / bins
    segments = np.array([np.interp(start + grid * period, t, values)
                         for start in starts])
    return PhaseAverage(grid, segments.mean(axis=0),
                        segments.std(axis=0, ddof=1), len(starts))


def rising_event_times(events) -> list[float]:
    """Timestamps (s) of lo -> hi transitions from ctl sync events.

    Only transitions into the profile's hi level count; the initial
    idle -> lo event a run starts with is rising too, but it is not a gust
    edge and would misalign the fold.
    """
    rising = [ev for ev in events if ev.new_duty > ev.old_duty]
    if not rising:
        return []
    hi = max(ev.new_duty for ev in rising)
    return [ev.timestamp_us / 1e6 for ev in rising if ev.new_duty == hi]


def gust_align(log: FlightLog, events, period: float, bins: int = 256,
               fields: tuple[str, ...] = ("pitch", "x")) -> dict[str, PhaseAverage]:
    """Phase-averaged traces (mean and std vs phase) of the given fields,
    aligned so phase 0 is the wind lo -> hi command edge."""
    t0 = log.timestamp_us[0] / 1e6
    t = log.timestamp_us / 1e6 - t0
    starts = [e - t0 for e in rising_event_times(events)]
    return {f: phase_average(t, log.field(f), starts, period, bins) for f in fields}


def response_lag(command: np.ndarray, response: np.ndarray, dt: float,
                 period: float):
    """Delay of a periodic response behind its command wave.

    Both series share the time base; data is cropped to whole periods and
    the lag is the argmax of the normalized circular cross-correlation over
    [0, period).  Returns (lag_seconds, peak_correlation).
    """
    command = np.asarray(command, dtype=float)
    response = np.asarray(response, dtype=float)
    if len(command) != len(response):
        raise FlightError("command and response must share the time base")
    n_per = int(np.floor(len(command) * dt / period))
    if n_per < 2:
        raise InsufficientPeriods("need >= 2 complete periods")
    n = int(round(n_per * period / dt))
    c = command[:n] - np.mean(command[:n])
    r = response[:n] - np.mean(response[:n])
    if np.std(r) < 1e-12 * max(1.0, float(np.max(np.abs(response)))):
        raise FlatSignal("response has (near) zero variance")
    corr = np.fft.ifft(np.conj(np.fft.fft(c)) * np.fft.fft(r)).real
    corr /= (np.std(c) * np.std(r) * n)
    lags = np.arange(n) * dt
    window = lags < period
    k = int(np.argmax(corr[window]))
    return float(lags[k]), float(corr[k])


# --- file output -----------------------------------------------------------


def write_condition_stats_csv(path, stats: list[tuple[float, BoxStats]],
                              field: str, spline: SplineFit | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["condition", "min", "q1", "median", "q3", "max", "mean", "n"]
        if spline is not None:
            header.append("spline_mean")
        writer.writerow(header)
        for cond, bs in stats:
            row = [cond, f"{bs.min:.6f}", f"{bs.q1:.6f}", f"{bs.median:.6f}",
                   f"{bs.q3:.6f}", f"{bs.max:.6f}", f"{bs.mean:.6f}", bs.n]
            if spline is not None:
                row.append(f"{spline(cond):.6f}")
            writer.writerow(row)


def write_phase_average_csv(path, traces: dict[str, PhaseAverage]) -> None:
    names = sorted(traces)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase"] + [f"{n}_{s}" for n in names for s in ("mean", "std")])
        first = traces[names[0]]
        for i in range(len(first.phase)):
            row = [f"{first.phase[i]:.6f}"]
            for n in names:
                row += [f"{traces[n].mean[i]:.6f}", f"{traces[n].std[i]:.6f}"]
            writer.writerow(row)
