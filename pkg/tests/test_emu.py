import math
import socket
import time

import numpy as np
import pytest

from gustwall import emu, proto
from gustwall.calib import default_calibration
from gustwall.clocks import ManualClock
from gustwall.emu import (
    ArrayGeometry,
    FanState,
    ModuleCore,
    OutOfBounds,
    Plume,
    PlumeModel,
    step_fan,
    tach_read,
)

CENTER = (0.6, 0.375)
CORNER = (0.0, 0.0)


def first_order_oracle(rpm0, rpm_ss, tau, t):
    return rpm_ss + (rpm0 - rpm_ss) * math.exp(-t / tau)


class TestStepFan:
    def test_zero_duty_fixed_point(self):
        state = FanState()
        assert step_fan(state, 0.0, 0.1).rpm == 0.0

    def test_full_duty_reaches_ceiling(self):
        state = FanState(tau=0.3)
        for _ in range(200):
            state = step_fan(state, 1.0, 0.1)
        assert state.rpm == pytest.approx(3600.0, abs=1e-6)

    def test_one_tau_from_zero(self):
        # closed form: 3600 * (1 - e^-1) after one time constant
        state = step_fan(FanState(tau=0.3), 1.0, 0.3)
        assert state.rpm == pytest.approx(3600.0 * (1.0 - math.exp(-1.0)), rel=1e-12)

    @pytest.mark.parametrize("steps", [1, 7, 100])
    def test_matches_closed_form_at_any_step_size(self, steps):
        tau, total, duty = 0.3, 1.2, 0.7
        state = FanState(rpm=500.0, tau=tau)
        rpm_ss = default_calibration().rpm_for_duty(duty)
        dt = total / steps
        for _ in range(steps):
            state = step_fan(state, duty, dt)
        assert state.rpm == pytest.approx(
            first_order_oracle(500.0, rpm_ss, tau, total), rel=1e-9)

    def test_never_leaves_bounds(self):
        state = FanState(rpm=3600.0)
        for dt in (1e-4, 0.05, 3.0, 50.0):
            state = step_fan(state, 1.0, dt)
            assert 0.0 <= state.rpm <= 3600.0
            state = step_fan(state, 0.0, dt)
            assert 0.0 <= state.rpm <= 3600.0

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            step_fan(FanState(), 0.5, 0.0)


class TestTach:
    def test_stopped_fan_reads_zero(self):
        rng = np.random.default_rng(0)
        assert all(tach_read(FanState(rpm=0.0), rng) == 0 for _ in range(100))

    def test_jitter_stays_within_one_count(self):
        rng = np.random.default_rng(1)
        reads = {tach_read(FanState(rpm=3600.4), rng) for _ in range(200)}
        assert reads <= {3599, 3600, 3601}

    def test_mean_unbiased(self):
        rng = np.random.default_rng(2)
        reads = [tach_read(FanState(rpm=1800.0), rng) for _ in range(10000)]
        assert np.mean(reads) == pytest.approx(1800.0, abs=0.1)


class TestGeometry:
    def test_positions_tile_the_rectangle(self):
        geo = ArrayGeometry()
        pos = geo.fan_positions()
        assert pos.shape == (135, 2)
        assert geo.fan_pitch == pytest.approx(0.08)
        # 15 distinct columns spaced by the pitch, 9 rows
        xs = np.unique(np.round(pos[:, 0], 9))
        ys = np.unique(np.round(pos[:, 1], 9))
        assert len(xs) == 15 and len(ys) == 9
        assert np.allclose(np.diff(xs), 0.08)
        assert xs[0] == pytest.approx(0.04) and xs[-1] == pytest.approx(1.16)
        assert (pos >= 0).all() and (pos[:, 0] <= 1.2).all() and (pos[:, 1] <= 0.75).all()
        assert geo.width * geo.height == pytest.approx(0.9)


def steady_plume(rpm, model=None):
    plume = Plume(model=model)
    plume.observe(-10.0, np.full(135, float(rpm)))
    return plume


class TestPlume:
    def test_all_stopped_is_zero_everywhere(self):
        plume = steady_plume(0.0)
        rng = np.random.default_rng(0)
        for point in [CENTER, CORNER, (1.2, 0.75), (0.3, 0.6)]:
            assert plume.sample(point, 0.0, rng) == 0.0

    def test_out_of_bounds_rejected(self):
        plume = steady_plume(1000.0)
        with pytest.raises(OutOfBounds):
            plume.sample((1.3, 0.1), 0.0)
        with pytest.raises(OutOfBounds):
            plume.mean_speed((0.0, -0.01), 0.0)

    def test_core_mean_speed_is_calibrated_speed_exactly(self):
        # noise-free path at the core: v_cal(rpm) * E with E == 1
        plume = steady_plume(3600.0)
        assert plume.envelope(CENTER) == 1.0
        assert plume.mean_speed(CENTER, 0.0) == default_calibration().speed_for_rpm(3600.0)

    def test_envelope_decreases_toward_boundary(self):
        plume = steady_plume(3600.0)
        xs = np.linspace(0.6, 1.2, 30)
        values = [plume.envelope((x, 0.375)) for x in xs]
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
        assert values[0] == 1.0
        assert values[-1] == pytest.approx(plume.model.edge_gain)

    def test_full_rpm_center_average(self):
        plume = steady_plume(3600.0)
        v = plume.trace(CENTER, 0.0, 20 * 3000, 3000.0,
                        rng=np.random.default_rng(5))
        assert np.mean(v) == pytest.approx(3.4, abs=0.1)

    def test_boundary_average_below_center(self):
        plume = steady_plume(3600.0)
        rng = np.random.default_rng(6)
        center = np.mean(plume.trace(CENTER, 0.0, 6000, 3000.0, rng))
        corner = np.mean(plume.trace(CORNER, 0.0, 6000, 3000.0, rng))
        assert corner < center

    def test_turbulence_intensity_windows(self):
        # 20 s at 3 kHz, raw (unfiltered) statistics
        plume = steady_plume(3600.0)
        rng = np.random.default_rng(7)
        v = plume.trace(CENTER, 0.0, 60000, 3000.0, rng)
        ti = np.std(v, ddof=1) / np.mean(v)
        assert 0.015 <= ti <= 0.05
        v = plume.trace(CORNER, 0.0, 60000, 3000.0, rng)
        ti = np.std(v, ddof=1) / np.mean(v)
        assert 0.15 <= ti <= 0.25

    def test_deterministic_given_seed(self):
        a = steady_plume(1800.0, PlumeModel(noise_seed=42)).trace(CENTER, 0.0, 500, 1000.0)
        b = steady_plume(1800.0, PlumeModel(noise_seed=42)).trace(CENTER, 0.0, 500, 1000.0)
        assert np.array_equal(a, b)

    def test_transport_delay_floor_and_cap(self):
        assert steady_plume(3600.0).transport_delay() == pytest.approx(1.0 / 3.4, abs=1e-9)
        # 1/v above the floor once speed drops below 4 m/s; capped when stopped
        assert steady_plume(0.0).transport_delay() == PlumeModel().transport_cap_s
        slow = steady_plume(900.0)  # 0.65 m/s -> 1.54 s delay
        assert slow.transport_delay() == pytest.approx(1.0 / 0.65, rel=1e-6)

    def test_sample_plume_functional_form(self):
        fans = [FanState(rpm=3600.0)] * 135
        rng = np.random.default_rng(0)
        v = emu.sample_plume(fans, ArrayGeometry(), PlumeModel(), CENTER, 0.0, rng)
        assert v == pytest.approx(3.4, abs=3.4 * 0.03 * 5)


class TestModuleCore:
    def test_ping_pong_matching_seq(self):
        core = ModuleCore(4)
        image = proto.encode_frame(proto.ping(4, seq=77))
        replies = core.handle_datagram(image, now=0.0)
        assert len(replies) == 1
        assert replies[0].msg_type is proto.MsgType.PONG
        assert replies[0].seq == 77

    def test_set_pwm_then_zero_decays(self):
        core = ModuleCore(0)
        core.handle_datagram(proto.encode_frame(proto.set_pwm(0, [10000] * 9, 0)), 0.0)
        core.service(0.0)
        core.service(1.0)
        assert core.rpms().min() > 3000
        core.handle_datagram(proto.encode_frame(proto.set_pwm(0, [0] * 9, 1)), 1.0)
        core.service(4.0)
        assert core.rpms().max() < 3600 * math.exp(-3.0 / 0.3) + 1

    def test_malformed_counted_never_fatal(self):
        core = ModuleCore(0)
        assert core.handle_datagram(b"\x00garbage", 0.0) == []
        # wrong module index is dropped too
        assert core.handle_datagram(proto.encode_frame(proto.ping(3, 0)), 0.0) == []
        assert core.malformed == 2

    def test_watchdog_zeroes_after_silence(self):
        core = ModuleCore(0)
        core.handle_datagram(proto.encode_frame(proto.set_pwm(0, [10000] * 9, 0)), 0.0)
        core.service(1.9)
        assert core.duties.max() == 1.0
        core.service(2.05)  # > 2 s since the last SET_PWM
        assert core.duties.max() == 0.0
        assert core.watchdog_trips == 1
        core.service(6.0)
        assert core.rpms().max() < 100.0

    def test_telemetry_cadence(self):
        core = ModuleCore(0)
        frames = []
        t = 0.0
        while t < 1.001:
            frames += core.service(t)
            t += 0.005
        assert len(frames) == pytest.approx(21, abs=1)  # 20 Hz inclusive of t=0
        assert all(f.msg_type is proto.MsgType.TACH_REPORT for f in frames)
        seqs = [f.seq for f in frames]
        assert seqs == sorted(seqs)


class TestEndpointUdp:
    def test_udp_round_trip(self):
        clock = ManualClock()
        ep = emu.ModuleEndpoint(2, port=0, clock=clock)
        port = ep.sock.getsockname()[1]
        ep.start()
        try:
            ctrl = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            ctrl.settimeout(2.0)
            ctrl.bind(("127.0.0.1", 0))
            ctrl.sendto(proto.encode_frame(proto.ping(2, seq=5)), ("127.0.0.1", port))
            frame = proto.decode_frame(ctrl.recvfrom(65536)[0])
            assert frame.msg_type is proto.MsgType.PONG and frame.seq == 5

            ctrl.sendto(proto.encode_frame(proto.set_pwm(2, [5000] * 9, 6)),
                        ("127.0.0.1", port))
            clock.advance(1.0)
            deadline = time.time() + 2.0
            rpm = 0
            while time.time() < deadline:
                frame = proto.decode_frame(ctrl.recvfrom(65536)[0])
                if frame.msg_type is proto.MsgType.TACH_REPORT and max(frame.payload.rpms) > 0:
                    rpm = max(frame.payload.rpms)
                    break
            assert 0 < rpm <= 3600 + 1
            ctrl.close()
        finally:
            ep.stop()
