"""Central controller: compiles wind programs into per-tick duty targets,
optionally regulates per-fan RPM on tachometer feedback, drives the 15
module endpoints over UDP and records telemetry, sync events and a manifest
into a run directory.

Command and telemetry rates both default to 20 Hz: the fastest supported
gust preset is 0.5 Hz, so every half-period is resolved by 20 command
ticks, and the 50 ms command period stays far inside the modules' 2 s
watchdog.

Sync-event convention (normative for the event count bookkeeping): the
scheduler ticks at t = 0, 1/rate, ..., duration inclusive; an event is
emitted whenever the profile-commanded duty differs from the previously
commanded one, the transition from idle (duty 0) at t = 0 included.  A
square profile of duration T at frequency f therefore yields exactly
1 + 2*floor(T*f) events whenever the run does not end inside the hi
half-period (frac(T*f) < 0.5, or T*f integral) -- true of every shipped
preset; a run cut off mid-hi emits its extra, physically real, edge.  The
post-run safety zeroing is not a sync event.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import proto
from .calib import CalibrationSet, default_calibration
from .clocks import WallClock

COMMAND_HZ = 20.0
TELEMETRY_HZ = 20.0
STALE_TELEMETRY_PERIODS = 3.0

PROFILE_KINDS = ("steady", "square", "sine", "piecewise")


class CtlError(Exception):
    pass


class InvalidProfile(CtlError):
    pass


class RangeError(CtlError):
    """Requested speed falls outside the calibration range."""


class EndpointUnreachable(CtlError):
    def __init__(self, modules):
        self.modules = sorted(modules)
        super().__init__(f"modules did not answer PING: {self.modules}")


class AbortRequested(CtlError):
    """Operator stop; the wall has been zeroed and logs written."""


@dataclass
class GustProfile:
    """Declarative wind program.

    lo/hi (and piecewise targets) are wind speeds in m/s when unit="speed",
    or duty fractions when unit="duty".  Square profiles start at lo and
    switch to hi at half period; sine runs lo -> hi -> lo each period.
    """

    kind: str
    lo: float = 0.0
    hi: float = 0.0
    unit: str = "speed"
    frequency: float | None = None
    steps: list[tuple[float, float]] = field(default_factory=list)
    duration: float = 0.0
    mask: list[tuple[int, int]] | None = None  # FanId pairs; None = all fans

    def __post_init__(self) -> None:
        if self.kind not in PROFILE_KINDS:
            raise InvalidProfile(f"kind {self.kind!r} not one of {PROFILE_KINDS}")
        if self.unit not in ("speed", "duty"):
            raise InvalidProfile(f"unit {self.unit!r} not 'speed' or 'duty'")
        if self.kind in ("square", "sine"):
            if not self.frequency or self.frequency <= 0:
                raise InvalidProfile("periodic profiles need frequency > 0")
            if self.lo > self.hi:
                raise InvalidProfile("need lo <= hi")
        if self.kind == "piecewise":
            if not self.steps:
                raise InvalidProfile("piecewise profile needs steps")
            if any(d <= 0 for d, _ in self.steps):
                raise InvalidProfile("piecewise step durations must be > 0")
            if not self.duration:
                self.duration = float(sum(d for d, _ in self.steps))
        if self.duration <= 0:
            raise InvalidProfile("duration must be > 0")
        if self.unit == "duty":
            values = [self.lo, self.hi] + [t for _, t in self.steps]
            if any(not 0.0 <= v <= 1.0 for v in values):
                raise InvalidProfile("duty values must be in [0, 1]")
        if self.mask is not None:
            for m, f in self.mask:
                proto.FanId(m, f)  # validates ranges

    @classmethod
    def from_json(cls, obj) -> "GustProfile":
        if isinstance(obj, (str, bytes)):
            try:
                obj = json.loads(obj)
            except json.JSONDecodeError as exc:
                raise InvalidProfile(f"bad profile JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise InvalidProfile("profile JSON must be an object")
        known = {"kind", "lo", "hi", "unit", "frequency", "steps", "duration", "mask"}
        unknown = set(obj) - known
        if unknown:
            raise InvalidProfile(f"unknown profile fields: {sorted(unknown)}")
        try:
            return cls(
                kind=obj.get("kind", ""),
                lo=float(obj.get("lo", 0.0)),
                hi=float(obj.get("hi", 0.0)),
                unit=obj.get("unit", "speed"),
                frequency=obj.get("frequency"),
                steps=[(float(d), float(v)) for d, v in obj.get("steps", [])],
                duration=float(obj.get("duration", 0.0)),
                mask=[(int(m), int(f)) for m, f in obj["mask"]] if obj.get("mask") else None,
            )
        except (TypeError, ValueError) as exc:
            raise InvalidProfile(f"bad profile JSON: {exc}") from None

    def to_json(self) -> dict:
        out = {"kind": self.kind, "unit": self.unit, "duration": self.duration}
        if self.kind in ("steady", "square", "sine"):
            out["lo"] = self.lo
            out["hi"] = self.hi
        if self.frequency:
            out["frequency"] = self.frequency
        if self.steps:
            out["steps"] = [[d, v] for d, v in self.steps]
        if self.mask is not None:
            out["mask"] = [[m, f] for m, f in self.mask]
        return out

    def describe(self) -> str:
        unit = "m/s" if self.unit == "speed" else "duty"
        if self.kind == "steady":
            return f"steady {self.hi or self.lo:g} {unit}"
        if self.kind in ("square", "sine"):
            return f"{self.kind} {self.frequency:g} Hz {self.lo:g}-{self.hi:g} {unit}"
        return f"piecewise x{len(self.steps)}"


class Schedule:
    """Compiled profile: a pure function t -> duty plus the spatial mask."""

    def __init__(self, profile: GustProfile, duty_fn, mask: np.ndarray):
        self.profile = profile
        self.duration = profile.duration
        self._duty_fn = duty_fn
        self.mask = mask

    def duty(self, t: float) -> float:
        return self._duty_fn(t)

    def duties(self, t: float) -> np.ndarray:
        return self._duty_fn(t) * self.mask

    def phase(self, t: float) -> float:
        """Profile phase in radians (periodic kinds only, else 0)."""
        f = self.profile.frequency
        if self.profile.kind in ("square", "sine") and f:
            return 2.0 * np.pi * ((t * f) % 1.0)
        return 0.0


def _to_duty(value: float, unit: str, calibration: CalibrationSet) -> float:
    if unit == "duty":
        return float(value)
    result = calibration.speed_to_duty(value)
    if result.clamped:
        raise RangeError(f"{value} m/s is outside the calibration range")
    return result.duty


def compile_profile(profile: GustProfile,
                    calibration: CalibrationSet | None = None) -> Schedule:
    """Turn a profile into a tick function.  Speed-unit profiles are mapped
    through the calibration; RangeError if a requested speed is unreachable."""
    calibration = calibration or default_calibration()
    mask = np.ones(proto.NUM_FANS)
    if profile.mask is not None:
        mask = np.zeros(proto.NUM_FANS)
        for m, f in profile.mask:
            mask[proto.FanId(m, f).global_index] = 1.0

    if profile.kind == "steady":
        level = _to_duty(profile.hi or profile.lo, profile.unit, calibration)
        duty_fn = lambda t: level
    elif profile.kind == "square":
        lo = _to_duty(profile.lo, profile.unit, calibration)
        hi = _to_duty(profile.hi, profile.unit, calibration)
        freq = profile.frequency

        def duty_fn(t, lo=lo, hi=hi, freq=freq):
            return lo if (t * freq) % 1.0 < 0.5 else hi
    elif profile.kind == "sine":
        # starts at lo like the square; extremes checked against the range
        _to_duty(profile.lo, profile.unit, calibration)
        _to_duty(profile.hi, profile.unit, calibration)
        mid = 0.5 * (profile.lo + profile.hi)
        amp = 0.5 * (profile.hi - profile.lo)
        freq = profile.frequency
        unit = profile.unit

        def duty_fn(t, mid=mid, amp=amp, freq=freq, unit=unit):
            level = mid - amp * np.cos(2.0 * np.pi * freq * t)
            return _to_duty(float(level), unit, calibration)
    else:  # piecewise
        edges = np.cumsum([0.0] + [d for d, _ in profile.steps])
        levels = [_to_duty(v, profile.unit, calibration) for _, v in profile.steps]

        def duty_fn(t, edges=edges, levels=levels):
            i = int(np.searchsorted(edges, t, side="right")) - 1
            return levels[min(max(i, 0), len(levels) - 1)]

    return Schedule(profile, duty_fn, mask)


# --- PI regulation ----------------------------------------------------------


@dataclass
class PiGains:
    """Defaults tuned against the emulator's 0.3 s fan lag."""

    kp: float = 2e-4   # duty per RPM
    ki: float = 1e-3   # duty per (RPM * s)


class PiState:
    """One fan's regulator: clamped integration anti-windup, output [0, 1],
    integral bounded so ki * integral stays in [-1, 1]."""

    def __init__(self, gains: PiGains):
        self.gains = gains
        self.integral = 0.0

    def reset(self) -> None:
        self.integral = 0.0

    def update(self, error_rpm: float, dt: float, feedforward: float) -> float:
        g = self.gains
        candidate = self.integral + error_rpm * dt
        limit = 1.0 / g.ki
        candidate = min(max(candidate, -limit), limit)
        raw = feedforward + g.kp * error_rpm + g.ki * candidate
        out = min(max(raw, 0.0), 1.0)
        # integrate unless that pushes further into saturation
        if not ((raw > 1.0 and error_rpm > 0.0) or (raw < 0.0 and error_rpm < 0.0)):
            self.integral = candidate
        return out


@dataclass(frozen=True)
class SyncEvent:
    timestamp_us: int
    t: float
    old_duty: float
    new_duty: float
    phase: float


@dataclass
class TelemetryRow:
    timestamp_us: int
    t: float
    phase: float
    sync: bool
    stale_mask: int         # bit i set = module i telemetry stale
    lost_total: int
    duties: np.ndarray      # commanded, per fan
    target_rpm: np.ndarray
    measured_rpm: np.ndarray


class TachStore:
    """Latest TACH_REPORT per module with loss accounting; thread-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rpms = {}
        self._t = {}
        self._seq = {}
        self.lost = np.zeros(proto.MODULE_COUNT, dtype=int)
        self.reports = np.zeros(proto.MODULE_COUNT, dtype=int)

    def update(self, frame: proto.Frame, now: float) -> None:
        m = frame.module_index
        with self._lock:
            if m in self._seq:
                self.lost[m] += proto.seq_gap(self._seq[m], frame.seq)
            self._seq[m] = frame.seq
            self._rpms[m] = np.array(frame.payload.rpms, dtype=float)
            self._t[m] = now
            self.reports[m] += 1

    def rpms(self, module: int):
        with self._lock:
            return self._rpms.get(module)

    def age(self, module: int, now: float) -> float:
        with self._lock:
            t = self._t.get(module)
        return float("inf") if t is None else now - t

    def lost_total(self) -> int:
        with self._lock:
            return int(self.lost.sum())


class SessionCore:
    """Scheduler + regulation bookkeeping, free of sockets and clocks.

    tick(t, ...) returns the per-fan duty array to command and appends
    telemetry rows and sync events; the IO shell owns pacing and transport.
    """

    def __init__(self, schedule: Schedule,
                 calibration: CalibrationSet | None = None,
                 closed_loop: bool = False,
                 gains: PiGains | None = None,
                 command_hz: float = COMMAND_HZ,
                 telemetry_hz: float = TELEMETRY_HZ):
        self.schedule = schedule
        self.calibration = calibration or default_calibration()
        self.closed_loop = closed_loop
        self.command_hz = command_hz
        self.telemetry_hz = telemetry_hz
        self.pi = [PiState(gains or PiGains()) for _ in range(proto.NUM_FANS)]
        self.prev_duty: float = 0.0      # idle before the first tick
        self.events: list[SyncEvent] = []
        self.telemetry: list[TelemetryRow] = []
        self._last_t: float | None = None

    def tick_times(self) -> np.ndarray:
        """Scheduler ticks: 0 .. duration inclusive at the command rate."""
        n = int(np.floor(self.schedule.duration * self.command_hz + 1e-9)) + 1
        return np.arange(n) / self.command_hz

    def tick(self, t: float, tach: TachStore | None, now_us: int | None = None) -> np.ndarray:
        now_us = int(t * 1e6) if now_us is None else now_us
        base = self.schedule.duty(t)
        phase = self.schedule.phase(t)
        dt = 0.0 if self._last_t is None else t - self._last_t
        self._last_t = t

        sync = base != self.prev_duty
        if sync:
            self.events.append(SyncEvent(now_us, t, self.prev_duty, base, phase))
            self.prev_duty = base

        target_duty = base * self.schedule.mask
        target_rpm = np.asarray(self.calibration.rpm_for_duty(target_duty), dtype=float)
        duties = target_duty.copy()
        stale_mask = 0
        measured = np.full(proto.NUM_FANS, np.nan)

        if tach is not None:
            max_age = STALE_TELEMETRY_PERIODS / self.telemetry_hz
            for m in range(proto.MODULE_COUNT):
                rpms = tach.rpms(m)
                fresh = rpms is not None and tach.age(m, t) <= max_age
                if rpms is not None:
                    measured[m * 9:(m + 1) * 9] = rpms
                if not self.closed_loop:
                    continue
                if not fresh:
                    stale_mask |= 1 << m  # regulation falls back to feedforward
                    continue
                for j in range(proto.FANS_PER_MODULE):
                    i = m * 9 + j
                    err = target_rpm[i] - rpms[j]
                    duties[i] = self.pi[i].update(err, dt, target_duty[i])

        self.telemetry.append(TelemetryRow(
            now_us, t, phase, sync, stale_mask,
            tach.lost_total() if tach is not None else 0,
            duties.copy(), target_rpm.copy(), measured))
        return duties


# --- run directory -----------------------------------------------------------


def write_events_csv(path, events: list[SyncEvent]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_us,t,old_duty,new_duty,phase\n")
        for ev in events:
            fh.write(f"{ev.timestamp_us},{ev.t:.6f},{ev.old_duty:.6f},"
                     f"{ev.new_duty:.6f},{ev.phase:.6f}\n")


def read_events_csv(path) -> list[SyncEvent]:
    events = []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("timestamp_us,"):
            raise CtlError(f"{path}: not an events CSV")
        for line in fh:
            if not line.strip():
                continue
            ts, t, old, new, phase = line.split(",")
            events.append(SyncEvent(int(ts), float(t), float(old),
                                    float(new), float(phase)))
    return events


def write_telemetry_csv(path, rows: list[TelemetryRow]) -> None:
    cols = [f"duty_{i:03d}" for i in range(proto.NUM_FANS)]
    cols += [f"target_rpm_{i:03d}" for i in range(proto.NUM_FANS)]
    cols += [f"rpm_{i:03d}" for i in range(proto.NUM_FANS)]
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_us,t,phase,sync,stale_mask,lost_total," + ",".join(cols) + "\n")
        for r in rows:
            head = (f"{r.timestamp_us},{r.t:.6f},{r.phase:.6f},{int(r.sync)},"
                    f"{r.stale_mask},{r.lost_total}")
            duty = ",".join(f"{d:.4f}" for d in r.duties)
            target = ",".join(f"{v:.1f}" for v in r.target_rpm)
            rpm = ",".join("" if np.isnan(v) else f"{v:.1f}" for v in r.measured_rpm)
            fh.write(f"{head},{duty},{target},{rpm}\n")


def read_telemetry_duties(path) -> tuple[np.ndarray, np.ndarray]:
    """(t, duties[nticks, 135]) from a telemetry CSV, for replay checks."""
    ts, duties = [], []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(",")
        first = header.index("duty_000")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ts.append(float(parts[1]))
            duties.append([float(v) for v in parts[first:first + proto.NUM_FANS]])
    return np.array(ts), np.array(duties)


@dataclass
class SessionOptions:
    closed_loop: bool = False
    command_hz: float = COMMAND_HZ
    telemetry_hz: float = TELEMETRY_HZ
    gains: PiGains = field(default_factory=PiGains)
    ping_timeout_s: float = 1.0
    ping_retries: int = 3


@dataclass
class SessionResult:
    run_dir: Path
    ticks: int
    events: int
    lost_total: int
    aborted: bool
    unreachable: list[int]


class Session:
    """UDP shell around SessionCore: one socket toward all endpoints, a
    receiver thread feeding the TachStore, and run-directory output.

    Safety: every exit path (completion, error, abort) ends with zero-duty
    frames to every module and the logs flushed.
    """

    def __init__(self, schedule: Schedule, endpoints: list[tuple[str, int]],
                 run_dir, calibration: CalibrationSet | None = None,
                 options: SessionOptions | None = None, clock=None,
                 board=None, manifest_extra: dict | None = None):
        if len(endpoints) != proto.MODULE_COUNT:
            raise CtlError(f"need {proto.MODULE_COUNT} endpoints, got {len(endpoints)}")
        self.schedule = schedule
        self.endpoints = list(endpoints)
        self.run_dir = Path(run_dir)
        self.options = options or SessionOptions()
        self.calibration = calibration or default_calibration()
        self.core = SessionCore(schedule, self.calibration,
                                closed_loop=self.options.closed_loop,
                                gains=self.options.gains,
                                command_hz=self.options.command_hz,
                                telemetry_hz=self.options.telemetry_hz)
        self.clock = clock or WallClock()
        self.board = board
        self.manifest_extra = manifest_extra or {}
        self.tach = TachStore()
        self.abort_event = threading.Event()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("0.0.0.0", 0))
        self.sock.settimeout(0.05)
        self._tx_seq = np.zeros(proto.MODULE_COUNT, dtype=np.uint64)
        self._pongs: dict[int, int] = {}
        self._rx_stop = threading.Event()
        self._rx_thread: threading.Thread | None = None

    # -- transport helpers --

    def _send(self, module: int, frame: proto.Frame) -> None:
        try:
            self.sock.sendto(proto.encode_frame(frame), self.endpoints[module])
        except OSError:
            pass  # endpoint gone; loss shows up in telemetry gaps

    def _send_duties(self, duties: np.ndarray, now_us: int) -> None:
        scaled = np.clip(np.round(duties * proto.DUTY_MAX), 0, proto.DUTY_MAX).astype(int)
        for m in range(proto.MODULE_COUNT):
            frame = proto.set_pwm(m, scaled[m * 9:(m + 1) * 9].tolist(),
                                  seq=int(self._tx_seq[m]), timestamp_us=now_us)
            self._tx_seq[m] = (self._tx_seq[m] + 1) % 2**32
            self._send(m, frame)

    def _rx_loop(self) -> None:
        while not self._rx_stop.is_set():
            try:
                data, _ = self.sock.recvfrom(65536)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                frame = proto.decode_frame(data)
            except proto.ProtocolError:
                continue
            now = self.clock.now() - self._t0
            if frame.msg_type is proto.MsgType.TACH_REPORT:
                self.tach.update(frame, now)
                if self.board is not None:
                    self.board.update_tach(frame.module_index, frame.payload.rpms,
                                           int(self.tach.lost[frame.module_index]), now)
            elif frame.msg_type is proto.MsgType.PONG:
                self._pongs[frame.module_index] = frame.seq

    # -- phases --

    def preflight(self) -> None:
        """PING every endpoint; EndpointUnreachable lists the silent ones."""
        missing = set(range(proto.MODULE_COUNT))
        for attempt in range(self.options.ping_retries):
            for m in list(missing):
                self._send(m, proto.ping(m, seq=attempt))
            deadline = time.monotonic() + self.options.ping_timeout_s
            while missing and time.monotonic() < deadline:
                missing -= set(self._pongs)
                time.sleep(0.01)
            missing -= set(self._pongs)
            if not missing:
                return
        raise EndpointUnreachable(missing)

    def _zero_wall(self) -> None:
        now_us = int((self.clock.now() - self._t0) * 1e6)
        for _ in range(3):  # a few times: zeroing must survive datagram loss
            self._send_duties(np.zeros(proto.NUM_FANS), now_us)
            time.sleep(0.002)

    def _write_run_dir(self, result_fields: dict) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_telemetry_csv(self.run_dir / "telemetry.csv", self.core.telemetry)
        write_events_csv(self.run_dir / "events.csv", self.core.events)
        manifest = {
            "tool": "gustwall",
            "version": _package_version(),
            "profile": self.schedule.profile.to_json(),
            "closed_loop": self.options.closed_loop,
            "command_hz": self.options.command_hz,
            "telemetry_hz": self.options.telemetry_hz,
            "endpoints": [list(e) for e in self.endpoints],
            "started_utc": self._started_utc,
            "ended_utc": _utc_now(),
            "ticks": len(self.core.telemetry),
            "sync_events": len(self.core.events),
            "lost_total": self.tach.lost_total(),
            "outputs": ["telemetry.csv", "events.csv", "manifest.json"],
            **result_fields,
            **self.manifest_extra,
        }
        tmp = self.run_dir / "manifest.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        tmp.replace(self.run_dir / "manifest.json")  # atomic on POSIX

    def abort(self) -> None:
        self.abort_event.set()

    def run(self) -> SessionResult:
        self._t0 = self.clock.now()
        self._started_utc = _utc_now()
        self._rx_thread = threading.Thread(target=self._rx_loop, daemon=True,
                                           name="ctl-rx")
        self._rx_thread.start()
        aborted = False
        unreachable: list[int] = []
        try:
            try:
                self.preflight()
            except EndpointUnreachable as exc:
                unreachable = exc.modules
                raise
            if self.board is not None:
                self.board.set_profile(self.schedule.profile, running=True)
            for t in self.core.tick_times():
                if self.abort_event.is_set():
                    aborted = True
                    break
                self.clock.sleep(self._t0 + t - self.clock.now())
                now_us = int((self.clock.now() - self._t0) * 1e6)
                duties = self.core.tick(t, self.tach, now_us)
                self._send_duties(duties, now_us)
                if self.board is not None:
                    self.board.update_command(t, duties, self.core.schedule.phase(t),
                                              self.schedule.profile.describe())
        finally:
            # safety: zero the wall and flush logs on every exit path
            self._zero_wall()
            self._rx_stop.set()
            if self._rx_thread is not None:
                self._rx_thread.join(timeout=2.0)
            self.sock.close()
            if self.board is not None:
                self.board.set_profile(None, running=False)
                self.board.update_command(0.0, np.zeros(proto.NUM_FANS), 0.0, None)
            self._write_run_dir({"aborted": aborted, "unreachable": unreachable})
        if aborted:
            raise AbortRequested("session aborted by operator")
        return SessionResult(self.run_dir, len(self.core.telemetry),
                             len(self.core.events), self.tach.lost_total(),
                             aborted, unreachable)


def run_session(profile: GustProfile, endpoints: list[tuple[str, int]],
                run_dir, calibration: CalibrationSet | None = None,
                options: SessionOptions | None = None, clock=None,
                board=None, manifest_extra: dict | None = None) -> SessionResult:
    """Compile the profile and run one recorded session against the wall."""
    calibration = calibration or default_calibration()
    schedule = compile_profile(profile, calibration)
    session = Session(schedule, endpoints, run_dir, calibration, options,
                      clock, board, manifest_extra)
    return session.run()


def new_run_dir(root, tag: str) -> Path:
    """UTC-timestamped run directory name with a short random suffix so
    back-to-back runs never collide."""
    import secrets

    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    path = Path(root) / f"run-{stamp}-{tag}-{secrets.token_hex(3)}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _package_version() -> str:
    from . import __version__

    return __version__
