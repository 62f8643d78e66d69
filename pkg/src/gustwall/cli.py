"""gustwall: one entry point for the emulator, controller and the two
analysis pipelines.

    gustwall emulate   start the 15 emulated module endpoints (UDP)
    gustwall capture   offline virtual-sensor grid capture -> flowlab CSV
    gustwall run       run a wind program against the wall, record a run dir
    gustwall serve     start the operator HTTP API (console backend)
    gustwall flow      sensing-grid analysis (stats, flow map, rpm table)
    gustwall flight    flight-log analysis (boxplots, spline, gust response)
    gustwall calib     validate or sample calibration files

Exit codes: 0 ok, 2 usage, 3 input data error, 4 network/endpoint error.
GUSTWALL_BASE_PORT overrides the default UDP port base (47700).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import signal
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, calib, ctl, emu, flightlab, flowlab, proto

DEFAULT_BASE_PORT = 47700

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NETWORK = 4

PRESETS = ("steady-sweep", "gust-0.5hz", "gust-0.25hz", "gust-0.125hz")


class CliDataError(Exception):
    pass


class UsageError(Exception):
    pass


def base_port(args) -> int:
    if getattr(args, "base_port", None):
        return args.base_port
    return int(os.environ.get("GUSTWALL_BASE_PORT", DEFAULT_BASE_PORT))


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def load_emu_config(path) -> dict:
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise CliDataError(f"{path}: {exc}") from None


def load_calibration(args) -> calib.CalibrationSet:
    if getattr(args, "calib", None):
        return calib.load_calibration(args.calib)
    return calib.default_calibration()


def resolve_profile(name_or_path: str) -> tuple[ctl.GustProfile, str]:
    """A profile file path, or one of the shipped preset names."""
    path = Path(name_or_path)
    if path.exists():
        return ctl.GustProfile.from_json(path.read_text()), str(path)
    stem = name_or_path.removesuffix(".json")
    if stem in PRESETS:
        text = resources.files("gustwall.presets").joinpath(f"{stem}.json").read_text()
        return ctl.GustProfile.from_json(text), f"preset:{stem}"
    raise UsageError(f"no profile file or preset named {name_or_path!r} "
                     f"(presets: {', '.join(PRESETS)})")


def load_endpoints(args) -> list[tuple[str, int]]:
    if getattr(args, "endpoints", None):
        try:
            spec = json.loads(Path(args.endpoints).read_text())
            endpoints = [(str(h), int(p)) for h, p in spec]
        except (OSError, ValueError, TypeError) as exc:
            raise CliDataError(f"endpoints file {args.endpoints}: {exc}") from None
        if len(endpoints) != proto.MODULE_COUNT:
            raise CliDataError(f"endpoints file must list {proto.MODULE_COUNT} "
                               f"host/port pairs, got {len(endpoints)}")
        return endpoints
    port = base_port(args)
    return [("127.0.0.1", port + i) for i in range(proto.MODULE_COUNT)]


def make_plume_model(cfg: dict, seed: int | None) -> emu.PlumeModel:
    kwargs = {k: cfg[k] for k in ("ti_core", "ti_boundary", "edge_width",
                                  "edge_gain", "kernel_sigma", "noise_cutoff_hz",
                                  "transport_floor_s", "transport_cap_s")
              if k in cfg}
    if seed is not None:
        kwargs["noise_seed"] = seed
    elif "noise_seed" in cfg:
        kwargs["noise_seed"] = cfg["noise_seed"]
    return emu.PlumeModel(**kwargs)


# --- subcommands ------------------------------------------------------------


def cmd_emulate(args) -> int:
    cfg = load_emu_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    config = emu.EndpointConfig(
        telemetry_hz=cfg.get("telemetry_hz", 20.0),
        watchdog_s=cfg.get("watchdog_s", 2.0),
        tau=args.tau if args.tau is not None else cfg.get("tau", 0.3),
        seed=seed,
    )
    port = args.base_port or cfg.get("base_port") or base_port(args)
    host = args.host or cfg.get("host", "127.0.0.1")
    calibration = load_calibration(args)
    try:
        wall = emu.Emulator(base_port=port, host=host, config=config,
                            model=make_plume_model(cfg, seed),
                            calibration=calibration)
    except OSError as exc:
        print(f"error: cannot bind emulator ports {port}..{port + 14}: {exc}",
              file=sys.stderr)
        return EXIT_NETWORK
    print(f"gustwall emulator: 15 modules, tau={config.tau}s, seed={seed}")
    print("module  address")
    for ep in wall.endpoints:
        print(f"  {ep.module_index:02d}    {ep.host}:{ep.port}")
    wall.start()
    stop = {"flag": False}

    def _sig(*_):
        stop["flag"] = True

    signal.signal(signal.SIGINT, _sig)
    signal.signal(signal.SIGTERM, _sig)
    import time

    t_end = None if args.seconds is None else time.monotonic() + args.seconds
    try:
        while not stop["flag"] and (t_end is None or time.monotonic() < t_end):
            time.sleep(0.1)
    finally:
        wall.stop()
    print("emulator stopped")
    return EXIT_OK


def cmd_capture(args) -> int:
    cfg = load_emu_config(args.config) if args.config else {}
    model = make_plume_model(cfg, args.seed)
    plume = emu.Plume(model=model, calibration=load_calibration(args))
    plume.observe(-10.0, np.full(proto.NUM_FANS, float(args.rpm)))
    layout = flowlab.GridLayout()
    rate = args.rate
    n = int(round(args.seconds * rate))
    series = {}
    for sid in range(1, 16):
        samples = plume.trace(layout.position(sid), 0.0, n, rate)
        series[sid] = flowlab.SensorTimeSeries(sid, rate, samples,
                                               rpm_setting=float(args.rpm))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    flowlab.write_sensor_log(out, series)
    print(f"wrote {out} and {out.with_suffix('.json')} "
          f"({args.seconds}s x 15 sensors at {rate:g} Hz, rpm {args.rpm:g}, "
          f"seed {args.seed})")
    return EXIT_OK


def cmd_run(args) -> int:
    profile, source = resolve_profile(args.profile)
    if args.duration is not None:
        profile.duration = args.duration
        profile.__post_init__()
    endpoints = load_endpoints(args)
    calibration = load_calibration(args)
    out_root = Path(args.out)
    run_dir = ctl.new_run_dir(out_root, profile.kind)
    manifest_extra = {
        "subcommand": "run",
        "profile_source": source,
        "calib_hash": file_hash(args.calib) if args.calib else "default",
        "config_hash": file_hash(args.endpoints) if args.endpoints else "default",
        "seed": args.seed,
        "inputs": [source] + ([args.calib] if args.calib else []),
    }
    options = ctl.SessionOptions(closed_loop=args.closed_loop,
                                 ping_timeout_s=args.ping_timeout)
    schedule = ctl.compile_profile(profile, calibration)
    session = ctl.Session(schedule, endpoints, run_dir, calibration, options,
                          manifest_extra=manifest_extra)
    signal.signal(signal.SIGINT, lambda *_: session.abort())
    print(f"run {run_dir.name}: {profile.describe()} for {profile.duration:g}s "
          f"({'closed' if args.closed_loop else 'open'} loop)")
    try:
        result = session.run()
    except ctl.AbortRequested:
        print("aborted; wall zeroed, logs written", file=sys.stderr)
        return 130
    print(f"done: {result.ticks} ticks, {result.events} sync events, "
          f"{result.lost_total} telemetry frames lost -> {result.run_dir}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .opapi import ControllerService, OperatorApi

    endpoints = load_endpoints(args)
    service = ControllerService(endpoints, Path(args.out),
                                calibration=load_calibration(args),
                                options=ctl.SessionOptions(closed_loop=args.closed_loop))
    try:
        api = OperatorApi(service, host=args.host, port=args.port)
    except OSError as exc:
        print(f"error: cannot bind API port {args.port}: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    host, port = api.address
    print(f"operator API on http://{host}:{port} "
          f"(endpoints {endpoints[0][0]}:{endpoints[0][1]}..{endpoints[-1][1]})")
    api.start()
    stop = {"flag": False}

    def _sig(*_):
        stop["flag"] = True

    signal.signal(signal.SIGINT, _sig)
    signal.signal(signal.SIGTERM, _sig)
    import time

    try:
        while not stop["flag"]:
            time.sleep(0.1)
    finally:
        api.stop()
    print("api stopped")
    return EXIT_OK


def cmd_flow_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    calibration = load_calibration(args)
    runs = []
    for log in args.log:
        stats, rpm, warnings = flowlab.process_log(
            log, cutoff_hz=args.cutoff, sensor_curves=calibration.sensors,
            permissive=args.permissive)
        for warning in warnings:
            print(f"warning: {log}: {warning}", file=sys.stderr)
        stem = Path(log).stem
        flowlab.write_stats_csv(out / f"{stem}_stats.csv", stats, rpm)
        try:
            fmap = flowlab.interpolate_flow_map({s: st.mean for s, st in stats.items()},
                                                rpm_setting=rpm)
            flowlab.write_flowmap_csv(out / f"{stem}_flowmap.csv", fmap)
        except flowlab.IncompleteGrid as exc:
            if not args.permissive:
                raise
            print(f"warning: {log}: no flow map ({exc})", file=sys.stderr)
        if rpm is not None:
            runs.append((float(rpm), stats))
        print(f"{log}: {len(stats)} sensors -> {out / (stem + '_stats.csv')}")
    if len(runs) >= 2:
        rows, collapsed = flowlab.rpm_speed_table(runs)
        flowlab.write_rpm_speed_csv(out / "rpm_speed.csv", rows)
        if collapsed:
            print(f"note: duplicate rpm settings averaged: {collapsed}",
                  file=sys.stderr)
        print(f"rpm-speed table ({len(rows)} settings) -> {out / 'rpm_speed.csv'}")
    return EXIT_OK


def cmd_flight_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = flightlab.load_flight_csv(args.log)
    for field in ("pitch", "power"):
        stats = flightlab.condition_stats(log, field)
        points = [(cond, bs.mean) for cond, bs in stats]
        spline = None
        if len(points) >= 4:
            lam = args.lam if args.lam is not None else \
                flightlab.choose_lambda_loocv(points)
            spline = flightlab.smoothing_spline(points, lam)
        path = out / f"{field}_vs_condition.csv"
        flightlab.write_condition_stats_csv(path, stats, field, spline)
        print(f"{field}: {len(stats)} conditions -> {path}")
    if args.events:
        if args.period is None:
            raise CliDataError("--events needs --period (gust period in s)")
        events = ctl.read_events_csv(args.events)
        traces = flightlab.gust_align(log, events, args.period)
        path = out / "gust_traces.csv"
        flightlab.write_phase_average_csv(path, traces)
        print(f"gust alignment: {traces['pitch'].n_periods} periods -> {path}")
    return EXIT_OK


def cmd_calib(args) -> int:
    curves = calib.curves_from_csv(Path(args.file).read_text())
    if not curves:
        raise CliDataError(f"{args.file}: no curves found")
    for domain, curve in sorted(curves.items()):
        print(f"{domain}: {len(curve.xs)} knots, x [{curve.xs[0]:g}, {curve.xs[-1]:g}]"
              f" -> y [{curve.ys[0]:g}, {curve.ys[-1]:g}]  OK")
    if args.sample_out:
        domain = args.domain or sorted(curves)[0]
        if domain not in curves:
            raise CliDataError(f"{args.file}: no curve for domain {domain!r}")
        curve = curves[domain]
        xs = np.linspace(curve.xs[0], curve.xs[-1], args.samples)
        with open(args.sample_out, "w") as fh:
            fh.write("x,y\n")
            for x in xs:
                fh.write(f"{x:.6f},{float(curve.eval(x)):.6f}\n")
        print(f"sampled {domain} ({args.samples} points) -> {args.sample_out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gustwall",
        description="control plane, emulator and analysis tools for the "
                    "135-fan wind-gust wall")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("emulate", help="run the 15 emulated module endpoints")
    p.add_argument("--config", help="TOML config (ports, tau, plume, rates)")
    p.add_argument("--base-port", type=int, help="first UDP port (default "
                   "GUSTWALL_BASE_PORT or 47700)")
    p.add_argument("--host", help="bind address (default 127.0.0.1)")
    p.add_argument("--seed", type=int, help="noise seed")
    p.add_argument("--tau", type=float, help="fan time constant, seconds")
    p.add_argument("--seconds", type=float, help="stop after this long "
                   "(default: run until SIGINT)")
    p.add_argument("--calib", help="calibration CSV")
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("capture", help="offline virtual grid capture at one "
                       "RPM setting, written in the flowlab log format")
    p.add_argument("--rpm", type=float, required=True)
    p.add_argument("--seconds", type=float, default=20.0)
    p.add_argument("--rate", type=float, default=3000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", help="TOML config for the plume model")
    p.add_argument("--calib", help="calibration CSV")
    p.set_defaults(func=cmd_capture)

    p = sub.add_parser("run", help="run a wind program and record a run directory")
    p.add_argument("--profile", required=True,
                   help=f"profile JSON file or preset ({', '.join(PRESETS)})")
    p.add_argument("--duration", type=float, help="override profile duration, s")
    p.add_argument("--closed-loop", action="store_true",
                   help="regulate per-fan RPM on tachometer feedback")
    p.add_argument("--endpoints", help="JSON file with 15 [host, port] pairs "
                   "(default: 127.0.0.1 base-port..+14)")
    p.add_argument("--base-port", type=int)
    p.add_argument("--out", default="runs", help="run directory root")
    p.add_argument("--calib", help="calibration CSV")
    p.add_argument("--seed", type=int, help="recorded in the manifest")
    p.add_argument("--ping-timeout", type=float, default=1.0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="start the operator HTTP API")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--endpoints", help="JSON file with 15 [host, port] pairs")
    p.add_argument("--base-port", type=int)
    p.add_argument("--out", default="runs")
    p.add_argument("--closed-loop", action="store_true")
    p.add_argument("--calib", help="calibration CSV")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("flow", help="sensing-grid analysis")
    flow_sub = p.add_subparsers(dest="flow_command", required=True)
    pa = flow_sub.add_parser("analyze", help="stats, flow map and rpm table "
                             "from grid capture logs")
    pa.add_argument("--log", action="append", required=True,
                    help="capture CSV (repeatable; sidecar JSON alongside)")
    pa.add_argument("--out", required=True)
    pa.add_argument("--cutoff", type=float, default=50.0, help="low-pass Hz")
    pa.add_argument("--permissive", action="store_true",
                    help="skip bad sensors instead of failing")
    pa.add_argument("--calib", help="calibration CSV with sensor curves")
    pa.set_defaults(func=cmd_flow_analyze)

    p = sub.add_parser("flight", help="flight-log analysis")
    flight_sub = p.add_subparsers(dest="flight_command", required=True)
    pa = flight_sub.add_parser("analyze", help="pitch/power boxstats, spline "
                               "trend and gust alignment")
    pa.add_argument("--log", required=True, help="flight CSV")
    pa.add_argument("--events", help="ctl events.csv for gust alignment")
    pa.add_argument("--period", type=float, help="gust period in seconds")
    pa.add_argument("--lam", type=float, help="spline smoothing parameter "
                    "(default: leave-one-out grid search)")
    pa.add_argument("--out", required=True)
    pa.set_defaults(func=cmd_flight_analyze)

    p = sub.add_parser("calib", help="validate a calibration CSV, optionally "
                       "sample a curve to CSV")
    p.add_argument("file")
    p.add_argument("--sample-out", help="write a dense x,y sampling here")
    p.add_argument("--domain", help="which curve to sample")
    p.add_argument("--samples", type=int, default=101)
    p.set_defaults(func=cmd_calib)

    return parser


DATA_ERRORS = (CliDataError, calib.CalibError, flowlab.FlowError,
               flightlab.FlightError, ctl.CtlError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ctl.EndpointUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
