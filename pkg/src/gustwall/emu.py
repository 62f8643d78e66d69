"""Emulated fan wall: spin dynamics, tachometers, module endpoints and a
synthetic wind plume at the 1 m test plane.

The wall is 15 modules of 9 fans each (135 fans) filling a 1.2 x 0.75 m
rectangle.  Fans follow a first-order lag toward the steady-state RPM of the
commanded duty; real spin-up dynamics are unmeasured, so the time constant
(default 0.3 s) is configuration, chosen to keep a 0.5 Hz square gust
clearly resolvable.

The plume model produces the wind speed a virtual anemometer would see at a
point on the test plane: the calibrated speed of the kernel-averaged local
RPM, scaled by a spatial envelope that decays toward the rectangle boundary,
with band-limited multiplicative turbulence.  Turbulence intensity defaults
to 3% in the core and 22% at the boundary.  Everything is deterministic
given the noise seed and an injected clock.
"""

from __future__ import annotations

import math
import socket
import threading
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from . import proto
from .calib import CalibrationCurve, CalibrationSet, default_calibration
from .clocks import WallClock

RPM_CEILING = 3600.0


@dataclass(frozen=True)
class FanState:
    """One fan: current RPM, last commanded duty, spin time constant."""

    rpm: float = 0.0
    duty: float = 0.0
    tau: float = 0.3


def step_fan(state: FanState, commanded_duty: float, dt: float,
             duty_to_rpm: CalibrationCurve | None = None) -> FanState:
    """Advance one fan by dt seconds of first-order lag toward the
    steady-state RPM for the commanded duty, clamped to [0, 3600].

    rpm' = rpm + (rpm_ss - rpm) * (1 - exp(-dt/tau))
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if duty_to_rpm is None:
        duty_to_rpm = _DEFAULT_DUTY_TO_RPM
    rpm_ss = float(duty_to_rpm.eval(commanded_duty))
    rpm = state.rpm + (rpm_ss - state.rpm) * (1.0 - math.exp(-dt / state.tau))
    rpm = min(max(rpm, 0.0), RPM_CEILING)
    return replace(state, rpm=rpm, duty=commanded_duty)


_DEFAULT_DUTY_TO_RPM = default_calibration().duty_to_rpm


def tach_read(state: FanState, rng: np.random.Generator) -> int:
    """Tachometer reading: rounded RPM with +/-1 count of quantization
    jitter (none when the fan is stopped), clamped to 0..4000."""
    count = int(round(state.rpm))
    if count > 0:
        count += int(rng.integers(-1, 2))
    return min(max(count, 0), proto.RPM_MAX)


@dataclass(frozen=True)
class ArrayGeometry:
    """Physical layout: 5x3 modules of 3x3 fans tiling 1.2 x 0.75 m."""

    width: float = 1.2
    height: float = 0.75
    module_cols: int = 5
    module_rows: int = 3
    fan_grid: int = 3  # fans per module edge

    @property
    def fan_cols(self) -> int:
        return self.module_cols * self.fan_grid  # 15

    @property
    def fan_rows(self) -> int:
        return self.module_rows * self.fan_grid  # 9

    @property
    def fan_pitch(self) -> float:
        return self.width / self.fan_cols  # 0.08 m

    def fan_positions(self) -> np.ndarray:
        """(135, 2) fan-center coordinates indexed by global fan index."""
        pos = np.zeros((proto.NUM_FANS, 2))
        dx = self.width / self.fan_cols
        dy = self.height / self.fan_rows
        for module in range(proto.MODULE_COUNT):
            mcol = module % self.module_cols
            mrow = module // self.module_cols
            for fan in range(proto.FANS_PER_MODULE):
                fcol = fan % self.fan_grid
                frow = fan // self.fan_grid
                col = mcol * self.fan_grid + fcol
                row = mrow * self.fan_grid + frow
                pos[module * proto.FANS_PER_MODULE + fan] = (
                    (col + 0.5) * dx, (row + 0.5) * dy)
        return pos

    def contains(self, point) -> bool:
        x, y = point
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height


@dataclass
class PlumeModel:
    """Tunables of the synthetic plume at the 1 m plane.

    ti_core/ti_boundary are turbulence intensities (std/mean) in the core
    and at the rectangle edge; the envelope tapers from 1 to edge_gain over
    the outer edge_width meters with a raised-cosine profile.  Noise is an
    AR(1) process with unit stationary variance, corner frequency
    noise_cutoff_hz, so the configured TI is exact before any filtering.
    The 10 Hz default keeps ~91% of the turbulence power below the analysis
    pipeline's 50 Hz low-pass, so recovered TI stays within 15% of the
    configured value.
    """

    ti_core: float = 0.03
    ti_boundary: float = 0.22
    edge_width: float = 0.15
    edge_gain: float = 0.4
    kernel_sigma: float = 0.12
    noise_cutoff_hz: float = 10.0
    transport_floor_s: float = 0.25
    transport_cap_s: float = 2.0
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.ti_core <= self.ti_boundary:
            raise ValueError("need 0 < ti_core <= ti_boundary")
        if not 0.0 <= self.edge_gain <= 1.0:
            raise ValueError("edge_gain must be in [0, 1]")


class OutOfBounds(Exception):
    pass


class _NoiseState:
    """AR(1) noise with unit stationary variance at any step size:
    g' = a*g + sqrt(1 - a^2) * xi,  a = exp(-2*pi*fc*dt)."""

    __slots__ = ("g", "t")

    def __init__(self, rng: np.random.Generator):
        self.g = float(rng.standard_normal())
        self.t: float | None = None

    def sample(self, t: float, fc: float, rng: np.random.Generator) -> float:
        if self.t is not None and t > self.t:
            a = math.exp(-2.0 * math.pi * fc * (t - self.t))
            self.g = a * self.g + math.sqrt(1.0 - a * a) * float(rng.standard_normal())
        self.t = t
        return self.g


class Plume:
    """Synthetic wind field downstream of the wall.

    Callers feed it fan RPM snapshots via observe(t, rpms); sample() and
    trace() then report wind speeds at points on the plane, applying the
    advection transport delay, the spatial envelope and turbulence.
    """

    def __init__(self, geometry: ArrayGeometry | None = None,
                 model: PlumeModel | None = None,
                 calibration: CalibrationSet | None = None):
        self.geometry = geometry or ArrayGeometry()
        self.model = model or PlumeModel()
        self.calibration = calibration or default_calibration()
        self._positions = self.geometry.fan_positions()
        self._history_t: list[float] = []
        self._history_rpm: list[np.ndarray] = []
        self._rng = np.random.default_rng(self.model.noise_seed)
        self._sensors: dict[tuple[float, float], _NoiseState] = {}

    # spatial factors ----------------------------------------------------

    def edge_closeness(self, point) -> float:
        """1 at the rectangle edge, 0 in the core, raised-cosine in between."""
        x, y = point
        d = min(x, self.geometry.width - x, y, self.geometry.height - y)
        w = self.model.edge_width
        if d >= w:
            return 0.0
        return 0.5 * (1.0 + math.cos(math.pi * d / w))

    def envelope(self, point) -> float:
        c = self.edge_closeness(point)
        return 1.0 - (1.0 - self.model.edge_gain) * c

    def turbulence_intensity(self, point) -> float:
        c = self.edge_closeness(point)
        return self.model.ti_core + (self.model.ti_boundary - self.model.ti_core) * c

    def local_rpm(self, point, rpms: np.ndarray) -> float:
        """Gaussian-kernel-weighted average of fan RPMs around the point."""
        d2 = np.sum((self._positions - np.asarray(point)) ** 2, axis=1)
        w = np.exp(-d2 / (2.0 * self.model.kernel_sigma**2))
        # anchored at rpms[0] so a uniform field averages to itself exactly
        base = float(rpms[0])
        return base + float(np.dot(w, rpms - base) / np.sum(w))

    # fan-state history --------------------------------------------------

    def observe(self, t: float, rpms) -> None:
        """Record a snapshot of all 135 fan RPMs at time t."""
        rpms = np.asarray(rpms, dtype=float)
        if rpms.shape != (proto.NUM_FANS,):
            raise ValueError(f"need {proto.NUM_FANS} RPM values")
        if self._history_t and t <= self._history_t[-1]:
            # replace stale same-time snapshot rather than growing the log
            self._history_t[-1] = t
            self._history_rpm[-1] = rpms.copy()
            return
        self._history_t.append(t)
        self._history_rpm.append(rpms.copy())
        if len(self._history_t) > 4096:
            del self._history_t[:1024]
            del self._history_rpm[:1024]

    def rpms_at(self, t: float) -> np.ndarray:
        if not self._history_t:
            return np.zeros(proto.NUM_FANS)
        ts = self._history_t
        if t <= ts[0]:
            return self._history_rpm[0]
        if t >= ts[-1]:
            return self._history_rpm[-1]
        i = int(np.searchsorted(ts, t)) - 1
        f = (t - ts[i]) / (ts[i + 1] - ts[i])
        return (1.0 - f) * self._history_rpm[i] + f * self._history_rpm[i + 1]

    def transport_delay(self) -> float:
        """Advection time from wall to the 1 m plane at the current
        centerline speed, floored at transport_floor_s."""
        center = (self.geometry.width / 2.0, self.geometry.height / 2.0)
        rpms = self.rpms_at(self._history_t[-1]) if self._history_t else np.zeros(proto.NUM_FANS)
        v = float(self.calibration.speed_for_rpm(self.local_rpm(center, rpms)))
        if v <= 1e-6:
            return self.model.transport_cap_s
        return min(max(1.0 / v, self.model.transport_floor_s), self.model.transport_cap_s)

    # sampling -----------------------------------------------------------

    def mean_speed(self, point, t: float) -> float:
        """Noise-free speed at the point: v_cal(local delayed RPM) * E."""
        if not self.geometry.contains(point):
            raise OutOfBounds(f"point {point} outside the {self.geometry.width} x "
                              f"{self.geometry.height} m plane")
        rpms = self.rpms_at(t - self.transport_delay())
        v = float(self.calibration.speed_for_rpm(self.local_rpm(point, rpms)))
        return v * self.envelope(point)

    def sample(self, point, t: float, rng: np.random.Generator | None = None) -> float:
        """One virtual-anemometer reading at (point, t)."""
        rng = rng or self._rng
        v = self.mean_speed(point, t)
        key = (float(point[0]), float(point[1]))
        state = self._sensors.get(key)
        if state is None:
            state = self._sensors[key] = _NoiseState(rng)
        g = state.sample(t, self.model.noise_cutoff_hz, rng)
        return v * (1.0 + self.turbulence_intensity(point) * g)

    def trace(self, point, t0: float, n: int, rate_hz: float,
              rng: np.random.Generator | None = None) -> np.ndarray:
        """n uniformly sampled readings starting at t0; vectorized, so a
        20 s capture at 3 kHz is cheap.

        The noise-free speed varies on fan timescales (>= tau), so it is
        evaluated at <= 20 Hz and interpolated; the turbulence term is
        generated per sample.
        """
        rng = rng or self._rng
        dt = 1.0 / rate_hz
        times = t0 + dt * np.arange(n)
        stride = max(1, int(round(rate_hz / 20.0)))
        anchors = times[::stride]
        base = np.array([self.mean_speed(point, t) for t in anchors])
        if len(anchors) > 1:
            v = np.interp(times, anchors, base)
        else:
            v = np.full(n, base[0])
        a = math.exp(-2.0 * math.pi * self.model.noise_cutoff_hz * dt)
        white = rng.standard_normal(n)
        g0 = float(rng.standard_normal())
        g = lfilter([math.sqrt(1.0 - a * a)], [1.0, -a], white, zi=[a * g0])[0]
        return v * (1.0 + self.turbulence_intensity(point) * g)


def sample_plume(fans: list[FanState], geometry: ArrayGeometry, model: PlumeModel,
                 point, t: float, rng: np.random.Generator,
                 calibration: CalibrationSet | None = None) -> float:
    """One-shot functional form: sample a plume built from the given fan
    states (no transport history, so the delay sees a steady wall)."""
    plume = Plume(geometry, model, calibration)
    plume.observe(t - model.transport_cap_s, [f.rpm for f in fans])
    return plume.sample(point, t, rng)


# --- module endpoint ----------------------------------------------------


@dataclass
class EndpointConfig:
    telemetry_hz: float = 20.0
    watchdog_s: float = 2.0
    tau: float = 0.3
    seed: int = 0


class ModuleCore:
    """Protocol + dynamics of one 9-fan module, free of sockets and threads.

    handle_datagram() consumes one received datagram and returns reply
    frames; service() advances fan dynamics to `now`, runs the watchdog and
    returns the telemetry frames due.  The IO shell (ModuleEndpoint) or a
    test harness supplies time and transport.
    """

    def __init__(self, module_index: int, config: EndpointConfig | None = None,
                 calibration: CalibrationSet | None = None):
        if not 0 <= module_index < proto.MODULE_COUNT:
            raise ValueError(f"module_index {module_index} not in 0..14")
        self.module_index = module_index
        self.config = config or EndpointConfig()
        self.calibration = calibration or default_calibration()
        self.fans = [FanState(tau=self.config.tau) for _ in range(proto.FANS_PER_MODULE)]
        self.duties = np.zeros(proto.FANS_PER_MODULE)
        self.rng = np.random.default_rng((self.config.seed, module_index))
        self.malformed = 0
        self.frames_in = 0
        self.watchdog_trips = 0
        self.tx_seq = 0
        self.last_command_t: float | None = None
        self._last_step_t: float | None = None
        self._next_telemetry_t: float | None = None
        self._lock = threading.Lock()

    def rpms(self) -> np.ndarray:
        with self._lock:
            return np.array([f.rpm for f in self.fans])

    def handle_datagram(self, data: bytes, now: float) -> list[proto.Frame]:
        """Apply one datagram; malformed input is counted, never fatal."""
        try:
            frame = proto.decode_frame(data)
        except proto.ProtocolError:
            self.malformed += 1
            return []
        if frame.module_index != self.module_index:
            self.malformed += 1
            return []
        self.frames_in += 1
        if frame.msg_type is proto.MsgType.SET_PWM:
            with self._lock:
                self.duties = np.array(frame.payload.duties) / proto.DUTY_MAX
                self.last_command_t = now
            return []
        if frame.msg_type is proto.MsgType.PING:
            return [proto.pong(self.module_index, seq=frame.seq,
                               timestamp_us=int(now * 1e6))]
        return []

    def service(self, now: float) -> list[proto.Frame]:
        """Advance dynamics to `now`; returns TACH_REPORT frames due."""
        with self._lock:
            if self.last_command_t is not None and \
                    now - self.last_command_t > self.config.watchdog_s and \
                    np.any(self.duties > 0):
                self.duties = np.zeros(proto.FANS_PER_MODULE)
                self.watchdog_trips += 1
            if self._last_step_t is None:
                self._last_step_t = now
            dt = now - self._last_step_t
            if dt > 0:
                self.fans = [step_fan(f, d, dt, self.calibration.duty_to_rpm)
                             for f, d in zip(self.fans, self.duties)]
                self._last_step_t = now
            out = []
            if self._next_telemetry_t is None:
                self._next_telemetry_t = now
            if now >= self._next_telemetry_t:
                rpms = [tach_read(f, self.rng) for f in self.fans]
                out.append(proto.tach_report(self.module_index, rpms,
                                             seq=self.tx_seq,
                                             timestamp_us=int(now * 1e6)))
                self.tx_seq = (self.tx_seq + 1) % 2**32
                period = 1.0 / self.config.telemetry_hz
                while self._next_telemetry_t <= now:
                    self._next_telemetry_t += period
            return out


class ModuleEndpoint:
    """UDP shell around ModuleCore: binds a port, answers the controller,
    streams telemetry to the peer it last heard from."""

    def __init__(self, module_index: int, port: int, host: str = "127.0.0.1",
                 config: EndpointConfig | None = None,
                 calibration: CalibrationSet | None = None,
                 clock=None):
        self.core = ModuleCore(module_index, config, calibration)
        self.clock = clock or WallClock()
        self.host = host
        self.port = port
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.02)
        self.peer: tuple[str, int] | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def module_index(self) -> int:
        return self.core.module_index

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"module-{self.module_index:02d}")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        self.sock.close()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(65536)
                self.peer = addr
                replies = self.core.handle_datagram(data, self.clock.now())
            except socket.timeout:
                replies = []
            except OSError:
                break
            for frame in replies + self.core.service(self.clock.now()):
                if self.peer is not None:
                    try:
                        self.sock.sendto(proto.encode_frame(frame), self.peer)
                    except OSError:
                        pass


class Emulator:
    """All 15 module endpoints plus the shared plume."""

    def __init__(self, base_port: int = 47700, host: str = "127.0.0.1",
                 config: EndpointConfig | None = None,
                 model: PlumeModel | None = None,
                 geometry: ArrayGeometry | None = None,
                 calibration: CalibrationSet | None = None,
                 clock=None):
        self.config = config or EndpointConfig()
        self.calibration = calibration or default_calibration()
        self.endpoints = []
        try:
            for i in range(proto.MODULE_COUNT):
                self.endpoints.append(ModuleEndpoint(
                    i, base_port + i, host, self.config, self.calibration, clock))
        except OSError:
            for ep in self.endpoints:
                ep.sock.close()
            raise
        self.plume = Plume(geometry, model, self.calibration)

    def addresses(self) -> list[tuple[str, int]]:
        return [(ep.host, ep.port) for ep in self.endpoints]

    def rpms(self) -> np.ndarray:
        return np.concatenate([ep.core.rpms() for ep in self.endpoints])

    def start(self) -> None:
        for ep in self.endpoints:
            ep.start()

    def stop(self) -> None:
        for ep in self.endpoints:
            ep.stop()

    def __enter__(self) -> "Emulator":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
