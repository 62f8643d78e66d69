"""Operator HTTP API, the backend the web console talks to.

Endpoints (all JSON):
    GET  /state      full snapshot: per-fan commanded duty and measured RPM,
                     profile, phase, loss counters, staleness
    POST /profile    start a session from a GustProfile JSON body
                     (400 invalid profile, 409 while one is running)
    POST /abort      stop the running session (wall zeroed within one
                     command period)
    GET  /telemetry  server-push stream of state snapshots as
                     text/event-stream, decimated to <= 10 Hz

The server is the stdlib threading HTTP server; the state board is the one
internally synchronized store the scheduler and receiver write into and any
number of API readers poll.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import proto
from .calib import CalibrationSet, default_calibration
from .ctl import (
    AbortRequested,
    CtlError,
    EndpointUnreachable,
    GustProfile,
    InvalidProfile,
    RangeError,
    Session,
    SessionOptions,
    compile_profile,
    new_run_dir,
)

STREAM_HZ = 10.0


class StateBoard:
    """Latest wall state; one writer pair (scheduler tick, telemetry rx),
    many concurrent readers."""

    CENTER_MODULE = 7  # middle of the 5x3 module grid

    def __init__(self, calibration: CalibrationSet | None = None):
        self.calibration = calibration or default_calibration()
        self._lock = threading.Lock()
        self._duty = np.zeros(proto.NUM_FANS)
        self._rpm = np.zeros(proto.NUM_FANS)
        self._tach_t = np.full(proto.MODULE_COUNT, -np.inf)
        self._lost = np.zeros(proto.MODULE_COUNT, dtype=int)
        self._t = 0.0
        self._phase = 0.0
        self._profile: dict | None = None
        self._profile_desc: str | None = None
        self._running = False
        self._seq = 0

    def update_command(self, t, duties, phase, profile_desc) -> None:
        with self._lock:
            self._t = float(t)
            self._duty = np.asarray(duties, dtype=float).copy()
            self._phase = float(phase)
            self._profile_desc = profile_desc
            self._seq += 1

    def update_tach(self, module: int, rpms, lost: int, now: float) -> None:
        with self._lock:
            self._rpm[module * 9:(module + 1) * 9] = rpms
            self._tach_t[module] = now
            self._lost[module] = lost
            self._seq += 1

    def set_profile(self, profile: GustProfile | None, running: bool) -> None:
        with self._lock:
            self._profile = profile.to_json() if profile else None
            self._profile_desc = profile.describe() if profile else None
            self._running = running
            self._seq += 1

    def snapshot(self) -> dict:
        with self._lock:
            stale_age = 3.0 / 20.0
            now = self._t
            m = self.CENTER_MODULE
            center_rpm = float(np.mean(self._rpm[m * 9:(m + 1) * 9]))
            return {
                "seq": self._seq,
                "running": self._running,
                "t": self._t,
                "phase": self._phase,
                "profile": self._profile,
                "profile_desc": self._profile_desc,
                "duty": [round(float(d), 4) for d in self._duty],
                "rpm": [round(float(r), 1) for r in self._rpm],
                "stale": [bool(now - t > stale_age) for t in self._tach_t],
                "lost": [int(n) for n in self._lost],
                # estimated centerline speed from the center module's mean
                # measured RPM through the calibration (server-side, so the
                # console never does physics)
                "center_speed_mps": round(
                    float(self.calibration.speed_for_rpm(center_rpm)), 3),
            }


class ControllerService:
    """Owns the board and at most one running session at a time."""

    def __init__(self, endpoints: list[tuple[str, int]], out_root,
                 calibration: CalibrationSet | None = None,
                 options: SessionOptions | None = None,
                 manifest_extra: dict | None = None):
        self.endpoints = endpoints
        self.out_root = Path(out_root)
        self.calibration = calibration or default_calibration()
        self.options = options or SessionOptions()
        self.manifest_extra = manifest_extra or {}
        self.board = StateBoard(self.calibration)
        self._lock = threading.Lock()
        self._session: Session | None = None
        self._thread: threading.Thread | None = None
        self.last_error: str | None = None

    def running(self) -> bool:
        with self._lock:
            return self._thread is not None and self._thread.is_alive()

    def start(self, profile_json) -> dict:
        profile = GustProfile.from_json(profile_json)  # raises InvalidProfile
        with self._lock:
            if self._thread is not None and self._thread.is_alive():
                raise BusyError("a profile is already running")
            schedule = compile_profile(profile, self.calibration)  # RangeError
            run_dir = new_run_dir(self.out_root, "api")
            session = Session(schedule, self.endpoints, run_dir,
                              self.calibration, self.options, board=self.board,
                              manifest_extra=self.manifest_extra)
            self._session = session
            self.last_error = None

            def _run():
                try:
                    session.run()
                except AbortRequested:
                    pass
                except CtlError as exc:
                    self.last_error = str(exc)

            self._thread = threading.Thread(target=_run, daemon=True,
                                            name="ctl-session")
            self._thread.start()
            return {"started": True, "run_dir": str(run_dir),
                    "profile": profile.to_json()}

    def abort(self) -> dict:
        with self._lock:
            session, thread = self._session, self._thread
        if session is None or thread is None or not thread.is_alive():
            return {"aborted": False, "running": False}
        session.abort()
        thread.join(timeout=5.0)
        return {"aborted": True, "running": thread.is_alive()}

    def shutdown(self) -> None:
        self.abort()


class BusyError(CtlError):
    pass


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj) + "\n").encode()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: ControllerService = None  # type: ignore[assignment]
    stop_event: threading.Event = None  # type: ignore[assignment]

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _reply(self, code: int, obj) -> None:
        body = _json_bytes(obj)
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/state":
            self._reply(200, self.service.board.snapshot())
        elif self.path == "/telemetry":
            self._stream_telemetry()
        else:
            self._reply(404, {"error": f"no such endpoint {self.path}"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        if self.path == "/profile":
            try:
                self._reply(200, self.service.start(body.decode("utf-8", "replace")))
            except BusyError as exc:
                self._reply(409, {"error": str(exc)})
            except (InvalidProfile, RangeError) as exc:
                self._reply(400, {"error": str(exc)})
            except EndpointUnreachable as exc:
                self._reply(502, {"error": str(exc), "modules": exc.modules})
        elif self.path == "/abort":
            self._reply(200, self.service.abort())
        else:
            self._reply(404, {"error": f"no such endpoint {self.path}"})

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _stream_telemetry(self) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Connection", "close")
        self.end_headers()
        import time as _time

        last_seq = -1
        last_sent = 0.0
        try:
            while not self.stop_event.is_set():
                now = _time.monotonic()
                snap = self.service.board.snapshot()
                # push on change, but at least 1 Hz so clients can tell a
                # quiet wall from a dead controller
                if snap["seq"] != last_seq or now - last_sent >= 1.0:
                    last_seq = snap["seq"]
                    last_sent = now
                    self.wfile.write(b"data: " + json.dumps(snap).encode() + b"\n\n")
                    self.wfile.flush()
                _time.sleep(1.0 / STREAM_HZ)
        except (BrokenPipeError, ConnectionResetError):
            pass


class OperatorApi:
    """HTTP server wrapper; serve_forever runs on a background thread."""

    def __init__(self, service: ControllerService, host: str = "127.0.0.1",
                 port: int = 8080):
        self.service = service
        self.stop_event = threading.Event()
        handler = type("Handler", (_Handler,),
                       {"service": service, "stop_event": self.stop_event})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever,
                                        daemon=True, name="operator-api")
        self._thread.start()

    def stop(self) -> None:
        self.stop_event.set()
        self.service.shutdown()
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "OperatorApi":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
