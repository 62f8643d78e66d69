import numpy as np
import pytest

from gustwall import flowlab
from gustwall.calib import CalibrationCurve
from gustwall.flowlab import (
    FlowStats,
    GridLayout,
    IncompleteGrid,
    MissingQuiescent,
    NyquistViolation,
    SensorTimeSeries,
    flow_stats,
    interpolate_flow_map,
    lowpass,
    remove_offset,
    rpm_speed_table,
)


def series(samples, rate=3000.0, **kw):
    return SensorTimeSeries(sensor_id=1, sample_rate=rate,
                            samples=np.asarray(samples, dtype=float), **kw)


def tone(freq, rate=3000.0, seconds=2.0, amp=1.0):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


def analog_two_pass_gain(freq, cutoff=50.0):
    # squared Butterworth magnitude: one 2nd-order pass is 1/sqrt(1+(f/fc)^4),
    # forward+backward applies it twice
    return 1.0 / (1.0 + (freq / cutoff) ** 4)


def measured_amplitude(x):
    core = x[len(x) // 4: -len(x) // 4]
    return np.sqrt(2.0) * np.std(core)


class TestLowpass:
    def test_constant_unchanged(self):
        out = lowpass(series(np.full(3000, 3.4)))
        assert np.allclose(out.samples, 3.4, atol=1e-9)

    def test_in_band_tone_preserved(self):
        x = tone(5.0)
        out = lowpass(series(x))
        expected = analog_two_pass_gain(5.0)
        assert measured_amplitude(out.samples) == pytest.approx(expected, rel=0.01)
        assert measured_amplitude(out.samples) == pytest.approx(1.0, rel=0.01)

    def test_stop_band_tone_removed(self):
        x = tone(500.0)
        out = lowpass(series(x))
        # analog prototype predicts 1e-4; bilinear warping only strengthens it
        assert measured_amplitude(out.samples) < 0.03
        assert measured_amplitude(out.samples) < 2 * analog_two_pass_gain(500.0) + 0.001

    def test_near_cutoff_matches_analog_oracle(self):
        # at fc the two-pass gain is exactly 1/2; warping is mild at 50/3000
        x = tone(50.0, seconds=4.0)
        out = lowpass(series(x))
        assert measured_amplitude(out.samples) == pytest.approx(0.5, rel=0.02)

    def test_zero_phase_in_band(self):
        x = tone(8.0, seconds=2.0)
        y = lowpass(series(x)).samples
        n = len(x)
        sl = slice(n // 4, -n // 4)
        lags = np.arange(-20, 21)
        corr = [np.dot(x[sl], np.roll(y, k)[sl]) for k in lags]
        assert lags[int(np.argmax(corr))] == 0

    def test_linearity(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(5000)
        a = 7.3
        y1 = lowpass(series(a * x)).samples
        y2 = a * lowpass(series(x)).samples
        assert np.allclose(y1, y2, atol=1e-9)

    def test_reproducible_bit_for_bit(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(4000)
        assert np.array_equal(lowpass(series(x)).samples, lowpass(series(x)).samples)

    def test_nyquist_violation(self):
        with pytest.raises(NyquistViolation):
            lowpass(series(np.zeros(100), rate=90.0), cutoff_hz=50.0)


class TestRemoveOffset:
    def test_constant_becomes_zero(self):
        s = series(np.full(6000, 0.2))
        out = remove_offset(s, (0.0, 2.0))
        assert np.allclose(out.samples, 0.0, atol=1e-12)

    def test_recovers_signal_under_offset(self):
        rate = 3000.0
        quiet = np.zeros(int(rate))
        sig = np.concatenate([quiet, tone(3.0, rate=rate, seconds=2.0)])
        s = series(sig + 0.37, rate=rate)
        out = remove_offset(s, (0.0, 1.0))
        assert np.allclose(out.samples, sig, atol=1e-9)
        assert abs(np.mean(out.samples[: int(rate)])) < 1e-9

    def test_missing_window(self):
        s = series(np.zeros(3000))
        with pytest.raises(MissingQuiescent):
            remove_offset(s, (5.0, 6.0))  # outside the capture
        with pytest.raises(MissingQuiescent):
            remove_offset(s, (0.0, 0.3))  # too short


class TestFlowStats:
    def test_constant(self):
        st = flow_stats(series(np.full(100, 3.4)))
        assert st == FlowStats(pytest.approx(3.4), pytest.approx(0.0), pytest.approx(0.0), True)

    def test_sample_std_uses_n_minus_1(self):
        st = flow_stats(series([1.0, 2.0, 3.0, 4.0]))
        assert st.std == pytest.approx(np.std([1, 2, 3, 4], ddof=1))

    def test_ti_undefined_at_idle(self):
        st = flow_stats(series(np.full(100, 0.01)))
        assert not st.ti_defined
        assert np.isnan(st.ti)


class TestGridLayout:
    def test_positions_and_sets(self):
        layout = GridLayout()
        pos = layout.positions()
        assert pos[1] == (0.0, 0.0)
        assert pos[8] == (0.6, 0.375)
        assert pos[15] == (1.2, 0.75)
        for sid in flowlab.BOUNDARY_SENSORS:
            x, y = pos[sid]
            assert x in (0.0, 1.2) or y in (0.0, 0.75)
        for sid in flowlab.CORE_SENSORS:
            x, y = pos[sid]
            d = min(x, 1.2 - x, y, 0.75 - y)
            assert d >= 0.3


class TestFlowMap:
    def test_uniform_means_uniform_map(self):
        fmap = interpolate_flow_map({s: 2.0 for s in range(1, 16)})
        assert fmap.speed.shape == (76, 121)
        assert np.array_equal(fmap.speed, np.full((76, 121), 2.0))

    def test_exact_at_sensor_nodes(self):
        rng = np.random.default_rng(0)
        means = {s: float(rng.uniform(0.5, 3.4)) for s in range(1, 16)}
        # even-row sensors fall on the default 1 cm raster
        fmap = interpolate_flow_map(means)
        layout = GridLayout()
        for sid in (1, 3, 5, 11, 13, 15):
            x, y = layout.position(sid)
            i = int(round(x / 0.01))
            j = int(round(y / 0.01))
            assert fmap.speed[j, i] == means[sid]
        # the middle row (y = 0.375) sits between 1 cm rows; a 77-row raster
        # and the continuous evaluator are both exact there
        fmap77 = interpolate_flow_map(means, resolution=(121, 77))
        assert fmap77.speed[38, 60] == means[8]
        for sid in range(1, 16):
            assert fmap.value_at(*layout.position(sid)) == means[sid]

    def test_midpoint_between_core_sensors(self):
        means = {s: 1.0 for s in range(1, 16)}
        means[7], means[8] = 2.0, 3.0
        fmap = interpolate_flow_map(means)
        assert fmap.value_at(0.45, 0.375) == pytest.approx(2.5, rel=1e-12)

    def test_incomplete_grid(self):
        with pytest.raises(IncompleteGrid) as err:
            interpolate_flow_map({s: 1.0 for s in range(1, 14)})
        assert err.value.missing == [14, 15]


def stats_for(mean):
    return FlowStats(mean, 0.1, 0.1 / mean, True)


class TestRpmSpeedTable:
    def test_sorted_monotone_output(self):
        runs = []
        for rpm, speed in [(3600.0, 3.4), (1200.0, 0.9), (2400.0, 2.1)]:
            runs.append((rpm, {s: stats_for(speed if s in (7, 8, 9) else 0.5)
                               for s in range(1, 16)}))
        rows, collapsed = rpm_speed_table(runs)
        assert [r for r, _ in rows] == [1200.0, 2400.0, 3600.0]
        assert [v for _, v in rows] == [pytest.approx(0.9), pytest.approx(2.1),
                                        pytest.approx(3.4)]
        assert collapsed == []

    def test_duplicate_setting_collapsed_and_flagged(self):
        grid = {s: stats_for(2.0) for s in range(1, 16)}
        rows, collapsed = rpm_speed_table([(1800.0, grid), (1800.0, grid),
                                           (3600.0, grid)])
        assert len(rows) == 2
        assert collapsed == [1800.0]

    def test_needs_two_settings(self):
        grid = {s: stats_for(2.0) for s in range(1, 16)}
        with pytest.raises(flowlab.FlowError):
            rpm_speed_table([(1800.0, grid)])


class TestLogIO:
    def test_round_trip_and_pipeline(self, tmp_path):
        rate = 600.0
        rng = np.random.default_rng(1)
        by_id = {}
        for sid in range(1, 16):
            quiet = np.zeros(int(rate))
            wind = np.full(int(2 * rate), 1.0 + 0.1 * sid)
            noise = 0.01 * rng.standard_normal(len(quiet) + len(wind))
            by_id[sid] = SensorTimeSeries(sid, rate, np.concatenate([quiet, wind])
                                          + 0.25 + noise, rpm_setting=1800.0)
        log = tmp_path / "grid.csv"
        flowlab.write_sensor_log(log, by_id, quiescent=(0.0, 1.0))
        stats, rpm, warnings = flowlab.process_log(log)
        assert warnings == []
        assert rpm == 1800.0
        assert len(stats) == 15
        for sid in range(1, 16):
            assert stats[sid].mean == pytest.approx(1.0 + 0.1 * sid, abs=0.01)

    def test_corrupt_row_names_line(self, tmp_path):
        log = tmp_path / "bad.csv"
        log.write_text("timestamp_s,sensor_id,value\n0.0,1,0.5\n0.001,oops,0.5\n")
        log.with_suffix(".json").write_text('{"sample_rate_hz": 1000}')
        with pytest.raises(flowlab.InputDataError, match="line 3"):
            flowlab.read_sensor_log(log)

    def test_raw_units_need_curve(self, tmp_path):
        s = SensorTimeSeries(1, 1000.0, np.full(2000, 512.0), units="raw")
        log = tmp_path / "raw.csv"
        flowlab.write_sensor_log(log, {1: s})
        with pytest.raises(flowlab.InputDataError):
            flowlab.process_log(log)
        curve = CalibrationCurve((0.0, 1024.0), (0.0, 4.0), "sensor01_raw_to_speed")
        stats, _, _ = flowlab.process_log(log, sensor_curves={1: curve})
        assert stats[1].mean == pytest.approx(2.0)


class TestEndToEndRecovery:
    def test_emulated_capture_recovers_mean_and_ti(self, tmp_path):
        # plume-generated 20 s logs at 3 kHz; pipeline must recover the
        # configured mean within 2% and TI within 15%
        from gustwall.emu import Plume

        plume = Plume()
        plume.observe(-10.0, np.full(135, 3600.0))
        rate, n = 3000.0, 60000
        rng = np.random.default_rng(11)
        layout = GridLayout()
        for sid, configured_ti in [(8, 0.03), (1, 0.22)]:
            point = layout.position(sid)
            v = plume.trace(point, 0.0, n, rate, rng)
            truth_mean = plume.mean_speed(point, 0.0)
            s = SensorTimeSeries(sid, rate, v)
            st = flow_stats(lowpass(s))
            assert st.mean == pytest.approx(truth_mean, rel=0.02)
            assert st.ti == pytest.approx(configured_ti, rel=0.15)

    def test_boundary_mean_below_core(self):
        from gustwall.emu import Plume

        plume = Plume()
        plume.observe(-10.0, np.full(135, 3600.0))
        layout = GridLayout()
        core = plume.mean_speed(layout.position(8), 0.0)
        for sid in flowlab.BOUNDARY_SENSORS:
            assert plume.mean_speed(layout.position(sid), 0.0) < core
