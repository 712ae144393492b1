"""Domain types, signal normalization, reward and return arithmetic."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .config import ConfigError

SAMPLE_TIME = 0.2  # s
STATE_DIM = 13
N_COMPONENTS = 5

# Observation order; the four *_variation entries are one-step differences.
SIGNALS = (
    "engine_speed",
    "engine_speed_variation",
    "boost_actual",
    "boost_actual_variation",
    "boost_target",
    "boost_target_variation",
    "pedal_position",
    "pedal_position_variation",
    "boost_error",
    "coolant_temp",
    "gear",
    "vehicle_speed",
    "egr_valve_position",
)

COMPONENT_NAMES = ("nox", "soot", "boost", "safety", "failure")

# One packed experience: the wire record and the in-memory batch layout.
EXPERIENCE_DTYPE = np.dtype(
    [
        ("state", "<f4", (STATE_DIM,)),
        ("action", "<f4"),
        ("next_state", "<f4", (STATE_DIM,)),
        ("reward", "<f4"),
        ("components", "<f4", (N_COMPONENTS,)),
        ("terminal", "u1"),
    ]
)


class NonFiniteSignalError(ValueError):
    """A plant output was NaN or infinite."""


_BASE_RANGES = {
    "engine_speed": (0.0, 5000.0),
    "boost_actual": (90.0, 300.0),
    "boost_target": (90.0, 300.0),
    "pedal_position": (0.0, 100.0),
    "boost_error": (-100.0, 100.0),
    "coolant_temp": (-20.0, 120.0),
    "gear": (0.0, 6.0),
    "vehicle_speed": (0.0, 140.0),
    "egr_valve_position": (0.0, 100.0),
}
VARIATION_FRACTION = 0.05


def _default_ranges() -> dict[str, tuple[float, float]]:
    out = {}
    for name in SIGNALS:
        if name.endswith("_variation"):
            lo, hi = _BASE_RANGES[name[: -len("_variation")]]
            x = VARIATION_FRACTION * (hi - lo)
            out[name] = (-x, x)
        else:
            out[name] = _BASE_RANGES[name]
    return out


@dataclass(frozen=True)
class NormalizationRanges:
    """Per-signal (min, max) pairs, in observation order."""

    ranges: Mapping[str, tuple[float, float]] = field(default_factory=_default_ranges)

    def __post_init__(self):
        missing = set(SIGNALS) - set(self.ranges)
        if missing:
            raise ConfigError(f"missing normalization ranges: {sorted(missing)}")
        for name in SIGNALS:
            lo, hi = self.ranges[name]
            if not lo < hi:
                raise ConfigError(f"range for {name}: min {lo} must be < max {hi}")
        lo = np.array([self.ranges[n][0] for n in SIGNALS], dtype=np.float64)
        hi = np.array([self.ranges[n][1] for n in SIGNALS], dtype=np.float64)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "NormalizationRanges":
        ranges = dict(_default_ranges())
        for name in SIGNALS:
            lo, hi = ranges[name]
            lo = float(values.get(f"range.{name}.min", lo))
            hi = float(values.get(f"range.{name}.max", hi))
            ranges[name] = (lo, hi)
        return cls(ranges)

    def to_config(self) -> dict[str, float]:
        out = {}
        for name in SIGNALS:
            out[f"range.{name}.min"], out[f"range.{name}.max"] = self.ranges[name]
        return out


@dataclass(frozen=True)
class RewardWeights:
    f_nox: float = 0.14  # 1/g
    f_soot: float = 1.42  # 1/g
    f_boost: float = 0.00016  # 1/kPa
    f_safe: float = 0.015  # s/%
    f_fail: float = 20.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ConfigError(f"reward weight {f.name} must be >= 0")

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "RewardWeights":
        kw = {f.name: float(values[f.name]) for f in fields(cls) if f.name in values}
        return cls(**kw)

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.f_nox, self.f_soot, self.f_boost, self.f_safe, self.f_fail)


@dataclass(frozen=True)
class RawSignals:
    engine_speed: float  # rpm
    boost_actual: float  # kPa
    boost_target: float  # kPa
    pedal_position: float  # %
    boost_error: float  # kPa, target - actual
    coolant_temp: float  # degC
    gear: int
    vehicle_speed: float  # km/h
    egr_valve_position: float  # %
    prev_engine_speed: float
    prev_boost_actual: float
    prev_boost_target: float
    prev_pedal_position: float

    def as_array(self) -> np.ndarray:
        """Raw values in observation order (variations already differenced)."""
        return np.array(
            [
                self.engine_speed,
                self.engine_speed - self.prev_engine_speed,
                self.boost_actual,
                self.boost_actual - self.prev_boost_actual,
                self.boost_target,
                self.boost_target - self.prev_boost_target,
                self.pedal_position,
                self.pedal_position - self.prev_pedal_position,
                self.boost_error,
                self.coolant_temp,
                float(self.gear),
                self.vehicle_speed,
                self.egr_valve_position,
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class RewardInputs:
    m_nox: float  # g this step
    m_soot: float  # g this step
    delta_p: float  # kPa, p_des - p_act
    delta_omega: float  # %/s
    failed: bool

    def __post_init__(self):
        if self.m_nox < 0 or self.m_soot < 0 or self.delta_omega < 0:
            raise ValueError(f"negative reward input: {self}")


@dataclass
class Experience:
    state: np.ndarray
    action: float
    next_state: np.ndarray
    reward: float
    reward_components: tuple[float, ...]
    terminal: bool
    step_index: int


@dataclass
class EpisodeLog:
    """One episode: packed experience records plus physical totals.

    ``records`` uses :data:`EXPERIENCE_DTYPE`. The physical totals are
    accumulated by the rollout, not derived from the (weighted) reward
    components.
    """

    records: np.ndarray
    cumulative_nox: float = 0.0
    cumulative_soot: float = 0.0
    mean_abs_boost_error: float = 0.0
    mean_abs_speed_error: float = 0.0
    failure: bool = False
    segment_start: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.records["reward"], dtype=np.float64))

    @property
    def experiences(self) -> list[Experience]:
        return [
            Experience(
                state=r["state"].astype(np.float64),
                action=float(r["action"]),
                next_state=r["next_state"].astype(np.float64),
                reward=float(r["reward"]),
                reward_components=tuple(float(c) for c in r["components"]),
                terminal=bool(r["terminal"]),
                step_index=i,
            )
            for i, r in enumerate(self.records)
        ]


@dataclass
class EpisodeSummary:
    """Per-episode figures reported back to the Master."""

    segment_start: float
    steps: int
    total_reward: float
    nox: float
    soot: float
    mean_abs_boost_error: float
    mean_abs_speed_error: float
    failed: bool

    @classmethod
    def of(cls, ep: EpisodeLog) -> "EpisodeSummary":
        return cls(
            ep.segment_start,
            ep.steps,
            ep.total_reward,
            ep.cumulative_nox,
            ep.cumulative_soot,
            ep.mean_abs_boost_error,
            ep.mean_abs_speed_error,
            ep.failure,
        )


def pack_experiences(experiences: Iterable[Experience]) -> np.ndarray:
    exps = list(experiences)
    out = np.zeros(len(exps), dtype=EXPERIENCE_DTYPE)
    for i, e in enumerate(exps):
        out[i] = (e.state, e.action, e.next_state, e.reward, e.reward_components, e.terminal)
    return out


def normalize(raw: float, lo: float, hi: float) -> float:
    """Min-max map ``raw`` from [lo, hi] onto [-1, 1], clamping outside."""
    if not math.isfinite(raw):
        raise NonFiniteSignalError(f"non-finite plant signal: {raw}")
    if not lo < hi:
        raise ConfigError(f"invalid range ({lo}, {hi})")
    y = 2.0 * (raw - lo) / (hi - lo) - 1.0
    return min(1.0, max(-1.0, y))


def normalize_array(raw: np.ndarray, ranges: NormalizationRanges) -> np.ndarray:
    if not np.all(np.isfinite(raw)):
        raise NonFiniteSignalError(f"non-finite plant signal in {raw}")
    y = 2.0 * (raw - ranges.lo) / (ranges.hi - ranges.lo) - 1.0
    return np.clip(y, -1.0, 1.0)


def build_state(raw: RawSignals, ranges: NormalizationRanges) -> np.ndarray:
    """Normalized 13-element observation vector."""
    return normalize_array(raw.as_array(), ranges)


def compute_reward(inputs: RewardInputs, w: RewardWeights) -> tuple[float, tuple[float, ...]]:
    """Per-step reward and its five penalty terms (reward == -sum(terms))."""
    components = (
        w.f_nox * inputs.m_nox,
        w.f_soot * inputs.m_soot,
        w.f_boost * inputs.delta_p if inputs.delta_p > 0 else 0.0,
        w.f_safe * inputs.delta_omega,
        w.f_fail if inputs.failed else 0.0,
    )
    return -sum(components), components


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


def returns_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out
