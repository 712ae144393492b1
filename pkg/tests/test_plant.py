import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xilrl.config import ConfigError
from xilrl.plant import (
    EPISODE_SECONDS,
    DriveCycle,
    Plant,
    PlantConfig,
    PlantFailedError,
    PlantState,
    SegmentError,
    TierConfig,
    apply_safety,
    check_failure,
    emission_rates,
    reference_controller,
    reference_target,
    safe_max_velocity,
    synthetic_cycle,
    validation_segments,
)

CYCLE = synthetic_cycle()


def state(**kw):
    base = dict(
        time=0.0,
        vehicle_speed=80.0,
        target_speed=80.0,
        engine_speed=2000.0,
        gear=5,
        pedal=30.0,
        coolant_temp=80.0,
        boost_actual=150.0,
        boost_target=150.0,
        egr_position=20.0,
        egr_position_delayed=20.0,
        pedal_prev=30.0,
    )
    base.update(kw)
    return PlantState(**base)


def run_commands(tier, commands, start=400.0, seed=3):
    plant = Plant(CYCLE, tier)
    plant.reset(start, seed)
    out = []
    for c in commands:
        s, _ = plant.step(c)
        out.append(s)
    return out


class TestCycle:
    def test_synthetic_shape(self):
        assert CYCLE.duration == 1800.0
        assert CYCLE.target_speeds[0] == 0.0
        assert 120.0 < CYCLE.target_speeds.max() < 140.0
        assert np.all(CYCLE.target_speeds >= 0)

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "trace.csv"
        CYCLE.to_csv(path)
        assert path.read_text().splitlines()[0] == "time_s,speed_kmh"
        back = DriveCycle.from_csv(path)
        # six significant digits on disk
        np.testing.assert_allclose(back.target_speeds, CYCLE.target_speeds, rtol=1e-5, atol=1e-6)

    def test_interpolates_between_knots(self, tmp_path):
        path = tmp_path / "ramp.csv"
        path.write_text("time_s,speed_kmh\n0,0\n1,10\n400,10\n")
        c = DriveCycle.from_csv(path)
        assert c.speed_at(0.4) == pytest.approx(4.0)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,v\n0,0\n")
        with pytest.raises(ConfigError):
            DriveCycle.from_csv(path)

    def test_non_monotone_times(self):
        with pytest.raises(ConfigError):
            DriveCycle("x", np.array([0.0, 2.0, 1.0]), np.zeros(3))

    def test_validation_segments_fit(self):
        segs = validation_segments(CYCLE)
        assert len(segs) == 3
        assert all(0 <= s <= CYCLE.duration - EPISODE_SECONDS for s in segs)


class TestReset:
    def test_start_at_standstill(self):
        s = Plant(CYCLE).reset(0.0, 1)
        assert s.vehicle_speed == 0.0 and s.gear == 0
        assert s.egr_position == 0.0 and not s.failed
        assert s.coolant_temp == PlantConfig().coolant_start

    def test_same_seed_same_state(self):
        assert Plant(CYCLE, TierConfig.hil()).reset(100.0, 9) == Plant(CYCLE, TierConfig.hil()).reset(100.0, 9)

    def test_segment_boundary(self):
        p = Plant(CYCLE)
        p.reset(CYCLE.duration - EPISODE_SECONDS, 0)
        with pytest.raises(SegmentError):
            p.reset(CYCLE.duration - EPISODE_SECONDS + 1, 0)
        with pytest.raises(SegmentError):
            p.reset(-1.0, 0)


class TestStep:
    def test_zero_command_holds_valve(self):
        states = run_commands(TierConfig.mil(), [0.0] * 20)
        assert all(s.egr_position == 0.0 for s in states)

    def test_integration(self):
        # cruise start so that a wide-open valve cannot stall the engine
        states = run_commands(TierConfig.mil(), [50.0] * 10, start=1300.0)
        # 50 %/s * 0.2 s per step
        assert [s.egr_position for s in states[:2]] == pytest.approx([10.0, 20.0])
        assert states[-1].egr_position == pytest.approx(100.0)
        assert not states[-1].failed

    def test_position_saturates(self):
        states = run_commands(TierConfig.mil(), [-50.0] * 3)
        assert states[-1].egr_position == 0.0

    def test_hil_delay_line(self):
        cmds = list(np.random.default_rng(0).uniform(-50, 50, size=30))
        mil = run_commands(TierConfig.mil(), cmds)
        delayed = run_commands(TierConfig.hil(valve_noise_std=0.0, position_quantization=0.0, sensor_noise_std=0.0, nox_map_shift=1.0), cmds)
        assert delayed[0].egr_position == 0.0
        for k in range(1, 30):
            assert delayed[k].egr_position == mil[k - 1].egr_position

    def test_failed_plant_refuses_step(self):
        p = Plant(CYCLE)
        p.reset(0.0, 0)
        p.state = replace(p.state, failed=True)
        with pytest.raises(PlantFailedError):
            p.step(0.0)

    def test_reward_inputs_are_masses(self):
        p = Plant(CYCLE)
        p.reset(400.0, 0)
        s, inputs = p.step(0.0, delta_omega=3.0)
        assert inputs.m_nox == pytest.approx(s.nox_rate * 0.2)
        assert inputs.m_soot == pytest.approx(s.soot_rate * 0.2)
        assert inputs.delta_p == pytest.approx(s.boost_target - s.boost_actual)
        assert inputs.delta_omega == 3.0

    def test_coolant_warms_first_order(self):
        states = run_commands(TierConfig.mil(), [0.0] * 5)
        expected = 25.0
        for _ in range(5):
            expected += (90.0 - expected) * 0.2 / 300.0
        assert states[-1].coolant_temp == pytest.approx(expected)

    @pytest.mark.parametrize("tier", [TierConfig.mil(), TierConfig.hil()])
    @given(cmds=st.lists(st.floats(-50, 50), min_size=1, max_size=60))
    def test_valve_stays_in_range(self, tier, cmds):
        for s in run_commands(tier, cmds, start=700.0):
            assert 0.0 <= s.egr_position <= 100.0
            assert 0.0 <= s.egr_position_delayed <= 100.0
            if s.failed:
                break

    def test_bitwise_reproducible(self):
        cmds = list(np.random.default_rng(1).uniform(-20, 20, size=50))
        a = run_commands(TierConfig.hil(), cmds, seed=5)
        b = run_commands(TierConfig.hil(), cmds, seed=5)
        assert a == b

    def test_ideal_hil_equals_mil(self):
        cmds = list(np.random.default_rng(2).uniform(-20, 20, size=80))
        assert run_commands(TierConfig.mil(), cmds) == run_commands(TierConfig.hil_ideal(), cmds)

    def test_driver_tracks_cycle(self):
        p = Plant(CYCLE)
        p.reset(0.0, 0)
        errs = []
        for _ in range(int((CYCLE.duration - 1) / 0.2)):
            s, _ = p.step(reference_controller(p.state))
            errs.append(abs(s.target_speed - s.vehicle_speed))
        assert np.mean(errs) < 1.0


class TestTier:
    def test_mil_has_no_degradations(self):
        with pytest.raises(ConfigError):
            TierConfig(tier="mil", actuation_delay_steps=1)

    def test_hil_defaults(self):
        t = TierConfig.hil()
        assert (t.actuation_delay_steps, t.valve_noise_std, t.position_quantization) == (1, 0.5, 0.5)
        assert t.nox_map_shift == 1.15

    def test_named_with_overrides(self):
        t = TierConfig.named("hil", {"tier.actuation_delay_steps": "3"})
        assert t.actuation_delay_steps == 3
        with pytest.raises(ConfigError):
            TierConfig.named("sil")


class TestEmissions:
    @given(
        st.floats(5, 100),
        st.floats(900, 4000),
        st.floats(0.0, 0.49),
        st.floats(0.001, 0.01),
    )
    def test_trade_off(self, pedal, speed, frac, dfrac):
        cfg = PlantConfig()
        nox0, soot0 = emission_rates(pedal, speed, frac, 80.0, 150.0, 150.0, cfg)
        nox1, soot1 = emission_rates(pedal, speed, frac + dfrac, 80.0, 150.0, 150.0, cfg)
        assert nox1 < nox0
        assert soot1 > soot0


class TestSafety:
    def test_cruise_unrestricted(self):
        assert safe_max_velocity(state(vehicle_speed=80.0)) == 50.0

    def test_at_cap_holds(self):
        s = state(vehicle_speed=0.0, pedal=10.0, pedal_prev=0.0, egr_position=30.0)
        assert safe_max_velocity(s) == 0.0

    def test_reach_cap_in_one_step(self):
        # (30 - 28) / 0.2
        s = state(vehicle_speed=0.0, pedal=10.0, pedal_prev=0.0, egr_position=28.0)
        assert safe_max_velocity(s) == pytest.approx(10.0)

    def test_clamp_and_delta_omega(self):
        assert apply_safety(25.0, 10.0) == (10.0, 15.0)
        assert apply_safety(-5.0, 10.0) == (-5.0, 0.0)


class TestFailure:
    def test_nominal_cruise(self):
        assert not check_failure(state())

    def test_high_egr_at_idle(self):
        # fraction 0.95 * 0.5 = 0.475 > 0.40 at 800 rpm < 1000 rpm
        s = state(engine_speed=800.0, egr_position=95.0, egr_position_delayed=95.0, vehicle_speed=0.0, gear=0)
        assert check_failure(s)

    def test_nan_boost(self):
        assert check_failure(state(boost_actual=math.nan))

    def test_latch(self):
        assert check_failure(state(failed=True))


class TestReference:
    def test_at_target_holds(self):
        target = reference_target(2000.0, 30.0)
        s = state(engine_speed=2000.0, pedal=30.0, egr_position=target)
        assert reference_controller(s) == pytest.approx(0.0, abs=1e-12)

    def test_proportional_law(self, monkeypatch):
        import xilrl.plant as plant

        monkeypatch.setattr(plant, "reference_target", lambda n, p: 40.0)
        # gain 2/s * (40 - 20)
        assert plant.reference_controller(state(egr_position=20.0)) == pytest.approx(40.0)

    def test_bilinear_cell(self):
        # cell (1500..2500 rpm) x (20..40 %) corners 20, 30 / 20, 30; centre is their mean
        assert reference_target(2000.0, 30.0) == pytest.approx((20 + 30 + 20 + 30) / 4)
        # corner values are exact
        assert reference_target(800.0, 0.0) == 8.0
        assert reference_target(4000.0, 100.0) == 10.0

    def test_command_saturates(self):
        assert reference_controller(state(engine_speed=2500.0, pedal=70.0, egr_position=100.0)) == -50.0
