import json
import socket
import time
from pathlib import Path

import numpy as np
import pytest

from gustwall import emu
from gustwall.cli import main

GOLDEN = Path(__file__).parent / "golden"
DATA = Path(__file__).resolve().parent.parent / "data"


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--no-such-flag"])
    assert exc.value.code == 2


def test_missing_profile_is_usage_error(tmp_path, capsys):
    assert main(["run", "--profile", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == 2


def test_capture_deterministic_given_seed(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["capture", "--rpm", "2400", "--seconds", "1",
                     "--rate", "300", "--seed", "7", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()


def test_flow_analyze_matches_golden_byte_for_byte(tmp_path):
    out = tmp_path / "out"
    assert main(["flow", "analyze", "--log", str(GOLDEN / "grid_1800.csv"),
                 "--out", str(out)]) == 0
    for name in ("grid_1800_stats.csv", "grid_1800_flowmap.csv"):
        assert (out / name).read_bytes() == (GOLDEN / "expected" / name).read_bytes()


def test_flow_analyze_corrupt_row_names_line(tmp_path, capsys):
    log = tmp_path / "bad.csv"
    log.write_text("timestamp_s,sensor_id,value\n0.0,1,0.5\nborked line here\n")
    log.with_suffix(".json").write_text('{"sample_rate_hz": 1000}')
    assert main(["flow", "analyze", "--log", str(log),
                 "--out", str(tmp_path / "out")]) == 3
    assert "line 3" in capsys.readouterr().err


def test_flow_analyze_permissive_skips_bad_sensor(tmp_path, capsys):
    # raw-unit log without sensor curves: every sensor errors, permissive
    # mode warns and still writes an (empty) stats file with exit 0
    import gustwall.flowlab as flowlab

    s = flowlab.SensorTimeSeries(1, 300.0, np.full(300, 512.0), units="raw")
    log = tmp_path / "raw.csv"
    flowlab.write_sensor_log(log, {1: s})
    assert main(["flow", "analyze", "--log", str(log),
                 "--out", str(tmp_path / "out")]) == 3
    assert main(["flow", "analyze", "--log", str(log), "--permissive",
                 "--out", str(tmp_path / "out")]) == 0


def test_flight_analyze_fixture(tmp_path):
    out = tmp_path / "fig"
    assert main(["flight", "analyze", "--log", str(DATA / "flapper_flight.csv"),
                 "--out", str(out)]) == 0
    stats = (out / "power_vs_condition.csv").read_text().splitlines()
    assert stats[0].startswith("condition,min,q1,median,q3,max,mean,n,spline_mean")
    assert len(stats) == 7  # six wind speeds
    assert (out / "pitch_vs_condition.csv").exists()


def test_flight_analyze_gust_alignment(tmp_path):
    out = tmp_path / "gust"
    assert main(["flight", "analyze",
                 "--log", str(DATA / "flapper_gust_0p25hz.csv"),
                 "--events", str(DATA / "flapper_gust_0p25hz_events.csv"),
                 "--period", "4.0", "--out", str(out)]) == 0
    header = (out / "gust_traces.csv").read_text().splitlines()[0]
    assert header == "phase,pitch_mean,pitch_std,x_mean,x_std"


def test_calib_validate_and_sample(tmp_path, capsys):
    from gustwall import calib

    path = tmp_path / "cal.csv"
    calib.save_calibration(path, calib.default_calibration())
    sample = tmp_path / "curve.csv"
    assert main(["calib", str(path), "--sample-out", str(sample),
                 "--domain", "rpm_to_speed", "--samples", "11"]) == 0
    lines = sample.read_text().splitlines()
    assert lines[0] == "x,y" and len(lines) == 12
    assert "rpm_to_speed" in capsys.readouterr().out

    bad = tmp_path / "bad.csv"
    bad.write_text("not a calibration\n")
    assert main(["calib", str(bad)]) == 3


def test_emulate_port_conflict_is_network_error(capsys):
    taken = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    taken.bind(("127.0.0.1", 0))
    port = taken.getsockname()[1]
    try:
        assert main(["emulate", "--base-port", str(port), "--seconds", "0.1"]) == 4
        assert "cannot bind" in capsys.readouterr().err
    finally:
        taken.close()


def test_run_against_emulator_writes_run_dir(tmp_path):
    with emu.Emulator(base_port=0) as wall:
        addrs = [list(ep.sock.getsockname()) for ep in wall.endpoints]
        endpoints = tmp_path / "endpoints.json"
        endpoints.write_text(json.dumps(addrs))
        assert main(["run", "--profile", "gust-0.25hz", "--duration", "2",
                     "--endpoints", str(endpoints),
                     "--out", str(tmp_path / "runs")]) == 0
        run_dirs = list((tmp_path / "runs").iterdir())
        assert len(run_dirs) == 1
        run = run_dirs[0]
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["subcommand"] == "run"
        assert manifest["profile_source"] == "preset:gust-0.25hz"
        assert manifest["profile"]["frequency"] == 0.25
        assert manifest["ticks"] == 41
        assert (run / "telemetry.csv").exists() and (run / "events.csv").exists()
        time.sleep(0.3)
        assert all(ep.core.duties.max() == 0.0 for ep in wall.endpoints)


def test_emulator_binds_consecutive_ports():
    wall = emu.Emulator(base_port=48620)
    try:
        assert [ep.port for ep in wall.endpoints] == list(range(48620, 48635))
        assert [ep.module_index for ep in wall.endpoints] == list(range(15))
    finally:
        for ep in wall.endpoints:
            ep.sock.close()


def test_base_port_env_override(monkeypatch):
    from gustwall.cli import build_parser, load_endpoints

    monkeypatch.setenv("GUSTWALL_BASE_PORT", "50123")
    args = build_parser().parse_args(["run", "--profile", "gust-0.5hz",
                                      "--out", "x"])
    endpoints = load_endpoints(args)
    assert endpoints[0] == ("127.0.0.1", 50123)
    assert endpoints[14] == ("127.0.0.1", 50137)


def test_emulate_runs_and_stops(capsys):
    assert main(["emulate", "--base-port", "48660", "--seconds", "0.3",
                 "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "module  address" in out
    assert "127.0.0.1:48674" in out  # 15th endpoint
    assert "emulator stopped" in out


def test_toml_config_feeds_capture_and_emulate(tmp_path):
    cfg = tmp_path / "emu.toml"
    cfg.write_text(
        "tau = 0.2\nti_core = 0.05\nti_boundary = 0.2\nnoise_cutoff_hz = 8.0\n"
        "seed = 11\n")
    out = tmp_path / "cap.csv"
    assert main(["capture", "--rpm", "3600", "--seconds", "1", "--rate", "600",
                 "--config", str(cfg), "--seed", "11", "--out", str(out)]) == 0
    from gustwall.flowlab import flow_stats, read_sensor_log

    series, _ = read_sensor_log(out)
    st = flow_stats(series[8])  # raw TI of a core sensor tracks ti_core
    assert st.ti == pytest.approx(0.05, rel=0.25)

    bad = tmp_path / "bad.toml"
    bad.write_text("tau = = 1\n")
    assert main(["capture", "--rpm", "100", "--seconds", "0.1", "--rate", "600",
                 "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 3


def test_presets_resolve():
    from gustwall.cli import PRESETS, resolve_profile

    for name in PRESETS:
        profile, source = resolve_profile(name)
        assert source == f"preset:{name}"
        assert profile.duration > 0
    sweep, _ = resolve_profile("steady-sweep")
    assert sweep.kind == "piecewise"
    assert len(sweep.steps) == 6
    assert all(d == 50.0 for d, _ in sweep.steps)
    assert [v for _, v in sweep.steps] == [0.5, 1.3, 1.9, 2.3, 2.7, 3.4]
