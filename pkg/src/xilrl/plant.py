"""Surrogate engine/vehicle plant with MiL and HiL fidelity tiers.

A desk-scale stand-in for a mean-value engine model. Longitudinal vehicle
with a look-ahead PI driver, fixed shift schedule, first-order boost
dynamics degraded by EGR, and static NOx/soot maps with an exponential EGR
trade-off. Stepped at 0.2 s. The HiL tier adds actuation delay, valve
noise and quantization, sensor noise and a NOx map shift.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import ConfigError, apply_overrides
from .core import SAMPLE_TIME, RawSignals, RewardInputs, _default_ranges

EPISODE_SECONDS = 300.0


class SegmentError(ValueError):
    """Requested segment does not fit in the drive cycle."""


class PlantFailedError(RuntimeError):
    """Stepping a plant whose failure latch is set."""


@dataclass(frozen=True)
class PlantConfig:
    idle_speed: float = 800.0  # rpm
    stall_margin: float = 200.0  # rpm above idle where stalling is possible
    stall_egr_fraction: float = 0.40
    egr_fraction_max: float = 0.5  # effective EGR fraction at 100 % valve
    safe_egr_cap: float = 30.0  # %
    launch_speed: float = 5.0  # km/h
    coolant_start: float = 25.0  # degC
    coolant_target: float = 90.0
    coolant_tau: float = 300.0  # s
    boost_tau: float = 0.8  # s
    boost_egr_loss: float = 0.8
    ambient_pressure: float = 100.0  # kPa
    boost_gain: float = 175.0  # kPa at full load
    wheel_radius: float = 0.31  # m
    final_drive: float = 3.5
    rolling_accel: float = 0.1  # m/s^2
    aero_coeff: float = 2.5e-4  # 1/m
    driver_lookahead: float = 1.0  # s
    driver_ki: float = 0.05  # 1/s
    nox_scale: float = 2.0  # g/s per fuel unit
    nox_egr_sens: float = 5.0
    soot_scale: float = 0.02  # g/s per fuel unit
    soot_egr_sens: float = 4.0
    soot_transient: float = 3.0
    idle_fuel: float = 0.08
    reference_gain: float = 2.0  # 1/s

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "PlantConfig":
        return apply_overrides(cls(), values, prefix="plant.")


GEAR_RATIOS = (0.0, 3.8, 2.1, 1.4, 1.0, 0.8, 0.65)
GEAR_ACCEL = (0.0, 3.0, 2.4, 1.8, 1.3, 1.0, 0.8)  # m/s^2 at full pedal
GEAR_UPSHIFT = (0.0, 15.0, 30.0, 50.0, 70.0, 95.0)  # km/h to leave gear i

# Baseline EGR position map (%), bilinear over engine speed x pedal.
REFERENCE_SPEEDS = (800.0, 1500.0, 2500.0, 4000.0)
REFERENCE_PEDALS = (0.0, 20.0, 40.0, 70.0, 100.0)
REFERENCE_MAP = (
    (8.0, 15.0, 25.0, 30.0, 30.0),
    (10.0, 20.0, 30.0, 35.0, 35.0),
    (10.0, 20.0, 30.0, 35.0, 30.0),
    (5.0, 10.0, 15.0, 15.0, 10.0),
)


@dataclass(frozen=True)
class TierConfig:
    tier: str = "mil"
    actuation_delay_steps: int = 0
    valve_noise_std: float = 0.0  # %
    position_quantization: float = 0.0  # %
    sensor_noise_std: float = 0.0  # fraction of each signal's range
    nox_map_shift: float = 1.0
    soot_map_shift: float = 1.0
    pace_real_time: bool = False

    def __post_init__(self):
        if self.tier not in ("mil", "hil"):
            raise ConfigError(f"unknown tier {self.tier!r}")
        if self.actuation_delay_steps < 0:
            raise ConfigError("actuation delay must be >= 0")
        if self.tier == "mil" and self.has_degradations:
            raise ConfigError("the MiL tier carries no degradations")

    @property
    def has_degradations(self) -> bool:
        return bool(
            self.actuation_delay_steps
            or self.valve_noise_std
            or self.position_quantization
            or self.sensor_noise_std
            or self.nox_map_shift != 1.0
            or self.soot_map_shift != 1.0
        )

    @classmethod
    def mil(cls) -> "TierConfig":
        return cls()

    @classmethod
    def hil(cls, **overrides) -> "TierConfig":
        base = cls(
            tier="hil",
            actuation_delay_steps=1,
            valve_noise_std=0.5,
            position_quantization=0.5,
            sensor_noise_std=0.005,
            nox_map_shift=1.15,
        )
        return replace(base, **overrides)

    @classmethod
    def hil_ideal(cls) -> "TierConfig":
        """HiL tier with every degradation disabled."""
        return cls(tier="hil")

    @classmethod
    def named(cls, name: str, values: Mapping[str, str] | None = None) -> "TierConfig":
        tier = {"mil": cls.mil, "hil": cls.hil, "hil-ideal": cls.hil_ideal}.get(name)
        if tier is None:
            raise ConfigError(f"unknown tier {name!r}")
        return apply_overrides(tier(), values or {}, prefix="tier.")


@dataclass(frozen=True)
class DriveCycle:
    name: str
    sample_times: np.ndarray
    target_speeds: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.sample_times, dtype=np.float64)
        v = np.asarray(self.target_speeds, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise ConfigError("drive cycle needs matching 1-D time and speed arrays")
        if np.any(np.diff(t) <= 0):
            raise ConfigError("drive cycle times must be strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigError("drive cycle speeds must be finite and >= 0")
        object.__setattr__(self, "sample_times", t)
        object.__setattr__(self, "target_speeds", v)
        grid = np.arange(t[0], t[-1] + SAMPLE_TIME / 2 + 2.0, SAMPLE_TIME)
        object.__setattr__(self, "_grid_start", float(t[0]))
        object.__setattr__(self, "_grid", np.interp(grid, t, v))

    @property
    def duration(self) -> float:
        return float(self.sample_times[-1] - self.sample_times[0])

    def speed_at(self, time: float) -> float:
        idx = int(round((time - self._grid_start) / SAMPLE_TIME))
        idx = min(max(idx, 0), len(self._grid) - 1)
        return float(self._grid[idx])

    @classmethod
    def from_csv(cls, path: str | Path) -> "DriveCycle":
        times, speeds = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"time_s", "speed_kmh"} <= set(reader.fieldnames):
                raise ConfigError(f"{path}: expected header 'time_s,speed_kmh'")
            for row in reader:
                times.append(float(row["time_s"]))
                speeds.append(float(row["speed_kmh"]))
        return cls(Path(path).stem, np.array(times), np.array(speeds))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "speed_kmh"])
            for t, v in zip(self.sample_times, self.target_speeds):
                w.writerow([f"{t:g}", f"{v:g}"])


# (start of phase, [(accel_s, cruise_kmh, cruise_s, decel_s, idle_s), ...])
_SYNTHETIC_PHASES = (
    ("low", [(10, 25, 20, 10, 20), (12, 40, 35, 14, 18), (8, 18, 15, 8, 22), (14, 45, 40, 15, 15),
             (10, 30, 25, 10, 25), (15, 50, 30, 16, 12), (9, 22, 20, 9, 20), (14, 42, 45, 14, 12)]),
    ("medium", [(20, 65, 60, 18, 15), (15, 50, 40, 15, 10), (22, 75, 70, 20, 12), (12, 45, 30, 12, 12),
                (18, 60, 55, 18, 12)]),
    ("high", [(25, 90, 90, 22, 10), (20, 70, 60, 18, 8), (28, 100, 100, 25, 10), (18, 80, 50, 30, 10)]),
    ("extra-high", [(50, 120, 80, 20, 0), (45, 130, 45, 45, 20)]),
)


def synthetic_cycle(duration: float = 1800.0) -> DriveCycle:
    """Built-in idle/urban/extra-urban/highway speed trace (1 Hz knots)."""
    knots_t = [0.0]
    knots_v = [0.0]
    t = 0.0
    idle_head = 8.0
    t += idle_head
    knots_t.append(t)
    knots_v.append(0.0)
    for _, trips in _SYNTHETIC_PHASES:
        for accel, v, cruise, decel, idle in trips:
            # slight speed undulation during cruise keeps the pedal busy
            t += accel
            knots_t.append(t)
            knots_v.append(v)
            n = max(1, int(cruise // 15))
            for k in range(n):
                t += cruise / n
                knots_t.append(t)
                knots_v.append(v * (1.0 + (0.06 if k % 2 == 0 else -0.04)) if k < n - 1 else v)
            t += decel
            knots_t.append(t)
            knots_v.append(0.0)
            if idle:
                t += idle
                knots_t.append(t)
                knots_v.append(0.0)
    # stretch or pad to the requested duration
    if t < duration:
        knots_t.append(duration)
        knots_v.append(0.0)
    else:
        scale = duration / t
        knots_t = [x * scale for x in knots_t]
    grid = np.arange(0.0, duration + 0.5, 1.0)
    speeds = np.interp(grid, knots_t, knots_v)
    # 5-point smoothing rounds off the corners of the trapezoids
    smooth = np.convolve(np.pad(speeds, 2, mode="edge"), np.ones(5) / 5, mode="valid")
    smooth[0] = 0.0
    return DriveCycle("synthetic", grid, np.maximum(smooth, 0.0))


@dataclass(frozen=True)
class PlantState:
    time: float  # s, absolute cycle time
    vehicle_speed: float  # km/h
    target_speed: float  # km/h
    engine_speed: float  # rpm
    gear: int
    pedal: float  # %
    coolant_temp: float  # degC
    boost_actual: float  # kPa
    boost_target: float  # kPa
    egr_position: float  # %, integrated command
    egr_position_delayed: float  # %, realized valve after tier effects
    nox_rate: float = 0.0  # g/s
    soot_rate: float = 0.0  # g/s
    failed: bool = False
    pedal_prev: float = 0.0
    engine_speed_prev: float = 0.0
    boost_actual_prev: float = 0.0
    boost_target_prev: float = 0.0
    driver_integral: float = 0.0  # km/h * s

    @property
    def boost_error(self) -> float:
        return self.boost_target - self.boost_actual


def egr_fraction(position: float, config: PlantConfig) -> float:
    return config.egr_fraction_max * position / 100.0


def select_gear(speed_kmh: float, pedal: float) -> int:
    if speed_kmh < 0.5 and pedal <= 0.0:
        return 0
    gear = 1
    while gear < 6 and speed_kmh >= GEAR_UPSHIFT[gear]:
        gear += 1
    return gear


def engine_speed_for(speed_kmh: float, gear: int, pedal: float, config: PlantConfig) -> float:
    if gear == 0:
        return config.idle_speed
    wheel_rpm = speed_kmh / 3.6 / config.wheel_radius * 60.0 / (2.0 * math.pi)
    n = wheel_rpm * GEAR_RATIOS[gear] * config.final_drive
    if gear == 1:
        # clutch slip during launch
        n = max(n, config.idle_speed + 12.0 * pedal)
    return max(n, config.idle_speed)


def boost_target_for(pedal: float, engine_speed: float, config: PlantConfig) -> float:
    load = pedal / 100.0
    speed_factor = min(1.0, max(0.15, (engine_speed - config.idle_speed) / 1400.0))
    return config.ambient_pressure + 1.0 + config.boost_gain * load * speed_factor


def emission_rates(
    pedal: float,
    engine_speed: float,
    egr_frac: float,
    coolant_temp: float,
    boost_actual: float,
    boost_target: float,
    config: PlantConfig,
    nox_shift: float = 1.0,
    soot_shift: float = 1.0,
) -> tuple[float, float]:
    """Engine-out (NOx, soot) rates in g/s."""
    load = pedal / 100.0
    fuel = (config.idle_fuel + load) * engine_speed / 2000.0
    warm = 0.85 + 0.15 * min(max(coolant_temp, 0.0), 100.0) / 90.0
    nox = config.nox_scale * fuel * (0.4 + load) * math.exp(-config.nox_egr_sens * egr_frac) * warm
    under = max(0.0, boost_target - boost_actual) / boost_target
    soot = (
        config.soot_scale
        * fuel
        * (0.2 + load * load)
        * math.exp(config.soot_egr_sens * (0.5 + 2.0 * load) * egr_frac)
        * (1.0 + config.soot_transient * under)
    )
    return nox * nox_shift, soot * soot_shift


def safe_max_velocity(state: PlantState, config: PlantConfig = PlantConfig()) -> float:
    """Upper bound on valve velocity during idle-to-launch, else +50 %/s."""
    if state.vehicle_speed < config.launch_speed and state.pedal > state.pedal_prev:
        v = (config.safe_egr_cap - state.egr_position) / SAMPLE_TIME
        return min(50.0, max(-50.0, v))
    return 50.0


def apply_safety(desired: float, safe: float) -> tuple[float, float]:
    """(executed velocity, safety correction) for a desired velocity."""
    return min(desired, safe), max(0.0, desired - safe)


def check_failure(state: PlantState, config: PlantConfig = PlantConfig()) -> bool:
    if state.failed:
        return True
    values = (
        state.vehicle_speed,
        state.engine_speed,
        state.boost_actual,
        state.boost_target,
        state.egr_position,
        state.egr_position_delayed,
        state.nox_rate,
        state.soot_rate,
        state.coolant_temp,
    )
    if not all(math.isfinite(v) for v in values):
        return True
    stalling = state.engine_speed < config.idle_speed + config.stall_margin
    return stalling and egr_fraction(state.egr_position_delayed, config) > config.stall_egr_fraction


def _bilinear(xs: Sequence[float], ys: Sequence[float], table, x: float, y: float) -> float:
    x = min(max(x, xs[0]), xs[-1])
    y = min(max(y, ys[0]), ys[-1])
    i = max(0, min(len(xs) - 2, int(np.searchsorted(xs, x, side="right")) - 1))
    j = max(0, min(len(ys) - 2, int(np.searchsorted(ys, y, side="right")) - 1))
    tx = (x - xs[i]) / (xs[i + 1] - xs[i])
    ty = (y - ys[j]) / (ys[j + 1] - ys[j])
    return (
        table[i][j] * (1 - tx) * (1 - ty)
        + table[i + 1][j] * tx * (1 - ty)
        + table[i][j + 1] * (1 - tx) * ty
        + table[i + 1][j + 1] * tx * ty
    )


def reference_target(engine_speed: float, pedal: float) -> float:
    return _bilinear(REFERENCE_SPEEDS, REFERENCE_PEDALS, REFERENCE_MAP, engine_speed, pedal)


def reference_controller(state: PlantState, config: PlantConfig = PlantConfig()) -> float:
    """Map-based baseline: proportional velocity toward the map's EGR target."""
    target = reference_target(state.engine_speed, state.pedal)
    v = config.reference_gain * (target - state.egr_position)
    return min(50.0, max(-50.0, v))


class Plant:
    """One stepping context: a drive cycle, a tier and its noise/delay state."""

    def __init__(self, cycle: DriveCycle, tier: TierConfig | None = None, config: PlantConfig | None = None):
        self.cycle = cycle
        self.tier = tier or TierConfig.mil()
        self.config = config or PlantConfig()
        self.state: PlantState | None = None
        self._rng = np.random.default_rng(0)
        self._delay: deque[float] = deque()
        self._measurement: np.ndarray | None = None
        self._prev_measurement: np.ndarray | None = None
        widths = _default_ranges()
        self._sensor_std = np.array(
            [
                widths["engine_speed"][1] - widths["engine_speed"][0],
                widths["boost_actual"][1] - widths["boost_actual"][0],
                widths["boost_target"][1] - widths["boost_target"][0],
                widths["pedal_position"][1] - widths["pedal_position"][0],
                widths["coolant_temp"][1] - widths["coolant_temp"][0],
                widths["vehicle_speed"][1] - widths["vehicle_speed"][0],
                widths["egr_valve_position"][1] - widths["egr_valve_position"][0],
            ]
        ) * self.tier.sensor_noise_std

    def reset(self, segment_start: float, seed: int) -> PlantState:
        if segment_start < 0 or segment_start + EPISODE_SECONDS > self.cycle.duration + 1e-9:
            raise SegmentError(
                f"segment [{segment_start}, {segment_start + EPISODE_SECONDS}] s outside cycle of {self.cycle.duration} s"
            )
        cfg = self.config
        t = float(self.cycle.sample_times[0] + segment_start)
        v = self.cycle.speed_at(t)
        gear = select_gear(v, 0.0)
        n = engine_speed_for(v, gear, 0.0, cfg)
        p_des = boost_target_for(0.0, n, cfg)
        self._rng = np.random.default_rng(seed)
        self._delay = deque([0.0] * self.tier.actuation_delay_steps)
        self.state = PlantState(
            time=t,
            vehicle_speed=v,
            target_speed=v,
            engine_speed=n,
            gear=gear,
            pedal=0.0,
            coolant_temp=cfg.coolant_start,
            boost_actual=p_des,
            boost_target=p_des,
            egr_position=0.0,
            egr_position_delayed=0.0,
            pedal_prev=0.0,
            engine_speed_prev=n,
            boost_actual_prev=p_des,
            boost_target_prev=p_des,
        )
        nox, soot = self._emissions(self.state)
        self.state = replace(self.state, nox_rate=nox, soot_rate=soot)
        self._measurement = None
        self._prev_measurement = None
        return self.state

    def _emissions(self, s: PlantState) -> tuple[float, float]:
        return emission_rates(
            s.pedal,
            s.engine_speed,
            egr_fraction(s.egr_position_delayed, self.config),
            s.coolant_temp,
            s.boost_actual,
            s.boost_target,
            self.config,
            self.tier.nox_map_shift,
            self.tier.soot_map_shift,
        )

    def step(self, valve_velocity_cmd: float, delta_omega: float = 0.0) -> tuple[PlantState, RewardInputs]:
        s = self.state
        if s is None:
            raise RuntimeError("plant stepped before reset")
        if s.failed:
            raise PlantFailedError("cannot step a failed plant; reset first")
        cfg, tier, dt = self.config, self.tier, SAMPLE_TIME
        cmd = min(50.0, max(-50.0, valve_velocity_cmd))
        if tier.actuation_delay_steps:
            self._delay.append(cmd)
            cmd = self._delay.popleft()
        position = min(100.0, max(0.0, s.egr_position + cmd * dt))
        realized = position
        if tier.valve_noise_std:
            realized += tier.valve_noise_std * float(self._rng.standard_normal())
        if tier.position_quantization:
            realized = round(realized / tier.position_quantization) * tier.position_quantization
        realized = min(100.0, max(0.0, realized))

        # driver and longitudinal dynamics
        t = s.time + dt
        v_target = self.cycle.speed_at(t)
        v_ahead = self.cycle.speed_at(t + cfg.driver_lookahead)
        integral = s.driver_integral + (v_target - s.vehicle_speed) * dt
        integral = min(20.0, max(-20.0, integral))
        v_ms = s.vehicle_speed / 3.6
        resist = cfg.rolling_accel * (v_ms > 0.01) + cfg.aero_coeff * v_ms * v_ms
        a_cmd = ((v_ahead - s.vehicle_speed) / cfg.driver_lookahead + cfg.driver_ki * integral) / 3.6
        need = a_cmd + resist
        drive_gear = max(1, s.gear)
        if need > 0:
            pedal = min(100.0, 100.0 * need / GEAR_ACCEL[drive_gear])
            torque = min(1.0, max(0.0, (s.boost_actual - 60.0) / (s.boost_target - 60.0)))
            accel = pedal / 100.0 * GEAR_ACCEL[drive_gear] * torque - resist
        else:
            pedal = 0.0
            accel = a_cmd
        v_new = max(0.0, s.vehicle_speed + accel * dt * 3.6)
        gear = select_gear(v_new, pedal)
        n = engine_speed_for(v_new, gear, pedal, cfg)

        # air path
        p_des = boost_target_for(pedal, n, cfg)
        frac = egr_fraction(realized, cfg)
        p_ss = cfg.ambient_pressure + (p_des - cfg.ambient_pressure) * (1.0 - cfg.boost_egr_loss * frac)
        p_act = s.boost_actual + (p_ss - s.boost_actual) * dt / cfg.boost_tau
        coolant = s.coolant_temp + (cfg.coolant_target - s.coolant_temp) * dt / cfg.coolant_tau

        new = PlantState(
            time=t,
            vehicle_speed=v_new,
            target_speed=v_target,
            engine_speed=n,
            gear=gear,
            pedal=pedal,
            coolant_temp=coolant,
            boost_actual=p_act,
            boost_target=p_des,
            egr_position=position,
            egr_position_delayed=realized,
            pedal_prev=s.pedal,
            engine_speed_prev=s.engine_speed,
            boost_actual_prev=s.boost_actual,
            boost_target_prev=s.boost_target,
            driver_integral=integral,
        )
        nox, soot = self._emissions(new)
        new = replace(new, nox_rate=nox, soot_rate=soot)
        failed = check_failure(new, cfg)
        if failed:
            new = replace(new, failed=True)
        self.state = new
        inputs = RewardInputs(
            m_nox=nox * dt if math.isfinite(nox) else 0.0,
            m_soot=soot * dt if math.isfinite(soot) else 0.0,
            delta_p=p_des - p_act if math.isfinite(p_act) else 0.0,
            delta_omega=delta_omega,
            failed=failed,
        )
        return new, inputs

    def observe(self) -> RawSignals:
        """Measured signals for the current state (sensor noise on HiL)."""
        s = self.state
        if s is None:
            raise RuntimeError("plant observed before reset")
        if self._measurement is None or self._measurement[-1] != s.time:
            meas = np.array(
                [s.engine_speed, s.boost_actual, s.boost_target, s.pedal, s.coolant_temp,
                 s.vehicle_speed, s.egr_position_delayed, s.time]
            )
            if self.tier.sensor_noise_std:
                meas[:7] += self._sensor_std * self._rng.standard_normal(7)
                meas[3] = min(100.0, max(0.0, meas[3]))
                meas[6] = min(100.0, max(0.0, meas[6]))
            self._prev_measurement = self._measurement
            self._measurement = meas
        m = self._measurement
        if self._prev_measurement is not None and self.tier.sensor_noise_std:
            prev = self._prev_measurement
            prev_n, prev_pa, prev_pd, prev_ped = prev[0], prev[1], prev[2], prev[3]
        else:
            prev_n, prev_pa, prev_pd, prev_ped = (
                s.engine_speed_prev, s.boost_actual_prev, s.boost_target_prev, s.pedal_prev
            )
        return RawSignals(
            engine_speed=m[0],
            boost_actual=m[1],
            boost_target=m[2],
            pedal_position=m[3],
            boost_error=m[2] - m[1],
            coolant_temp=m[4],
            gear=s.gear,
            vehicle_speed=m[5],
            egr_valve_position=m[6],
            prev_engine_speed=prev_n,
            prev_boost_actual=prev_pa,
            prev_boost_target=prev_pd,
            prev_pedal_position=prev_ped,
        )


def validation_segments(cycle: DriveCycle) -> list[float]:
    """Three fixed segment starts covering low, medium and high speed phases."""
    d = cycle.duration
    starts = [0.08 * d, 0.38 * d, 0.68 * d]
    return [float(min(max(0.0, round(s)), d - EPISODE_SECONDS)) for s in starts]
