"""Rollout executor: runs the policy against a plant and packs experiences."""

from __future__ import annotations

import logging
import math
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .agent import ActionDistribution, PolicySnapshot, SnapshotError, deserialize, forward, mean_action, scale_action
from .config import ConfigError
from .core import (
    EXPERIENCE_DTYPE,
    SAMPLE_TIME,
    STATE_DIM,
    EpisodeLog,
    EpisodeSummary,
    NormalizationRanges,
    RewardWeights,
    build_state,
    compute_reward,
)
from .plant import (
    EPISODE_SECONDS,
    DriveCycle,
    Plant,
    PlantConfig,
    TierConfig,
    apply_safety,
    reference_controller,
    safe_max_velocity,
)
from .protocol import (
    CHUNK_RECORDS,
    PROTOCOL_VERSION,
    Connection,
    CycleDone,
    Error,
    ErrorCode,
    Experiences,
    Hello,
    Policy,
    RunCycle,
    SessionConnection,
    Shutdown,
)

log = logging.getLogger(__name__)

EPISODE_STEPS = int(round(EPISODE_SECONDS / SAMPLE_TIME))


@dataclass(frozen=True)
class RolloutConfig:
    mode: str = "train"  # train | validate
    seed: int = 0
    tier: TierConfig = field(default_factory=TierConfig.mil)
    segment_plan: tuple[float, ...] | None = None  # None: random segments
    episode_length_steps: int = EPISODE_STEPS
    weights: RewardWeights = field(default_factory=RewardWeights)

    def __post_init__(self):
        if self.mode not in ("train", "validate"):
            raise ConfigError(f"unknown rollout mode {self.mode!r}")
        if self.episode_length_steps <= 0:
            raise ConfigError("episode length must be positive")


class Controller:
    """Chooses the desired valve velocity for a step."""

    records_actions = True

    def act(self, state: np.ndarray, plant: Plant, rng: np.random.Generator) -> tuple[float, float]:
        """Return (recorded pre-squash action, desired velocity %/s)."""
        raise NotImplementedError


class PolicyController(Controller):
    def __init__(self, snapshot: PolicySnapshot, mode: str):
        if snapshot.mlp.sizes[0] != STATE_DIM or snapshot.mlp.sizes[-1] != 1:
            raise ConfigError(f"policy layers {snapshot.mlp.sizes} do not match a {STATE_DIM}->1 agent")
        self.params = snapshot.actor64()
        self.std = math.exp(snapshot.log_std)
        self.mode = mode

    def act(self, state, plant, rng):
        dist = ActionDistribution(forward(self.params, state), self.std)
        if self.mode == "train":
            raw = dist.mean + dist.std * float(rng.standard_normal())
        else:
            raw = mean_action(dist)
        raw = float(np.float32(raw))
        return raw, scale_action(raw)


class ReferenceController(Controller):
    """The plant's map-based baseline; recorded action is the inverse-squashed command."""

    def act(self, state, plant, rng):
        velocity = reference_controller(plant.state, plant.config)
        raw = math.atanh(max(-0.999999, min(0.999999, velocity / 50.0)))
        return float(np.float32(raw)), velocity


def _as_f32_state(raw, ranges: NormalizationRanges) -> np.ndarray:
    # The wire carries float32; acting on the rounded state keeps Master and
    # Minion views of each experience identical.
    return build_state(raw, ranges).astype(np.float32).astype(np.float64)


def rollout_episode(
    controller: Controller,
    plant: Plant,
    segment_start: float,
    plant_seed: int,
    rng: np.random.Generator,
    weights: RewardWeights,
    ranges: NormalizationRanges,
    max_steps: int = EPISODE_STEPS,
) -> EpisodeLog:
    """Run one episode; ends at ``max_steps`` or on plant failure."""
    records = np.zeros(max_steps, dtype=EXPERIENCE_DTYPE)
    plant.reset(segment_start, plant_seed)
    state = _as_f32_state(plant.observe(), ranges)
    nox = soot = abs_dp = abs_dv = 0.0
    n = 0
    failed = False
    for k in range(max_steps):
        action, desired = controller.act(state, plant, rng)
        safe = safe_max_velocity(plant.state, plant.config)
        executed, delta_omega = apply_safety(desired, safe)
        ps, inputs = plant.step(executed, delta_omega)
        reward, components = compute_reward(inputs, weights)
        next_state = _as_f32_state(plant.observe(), ranges)
        terminal = inputs.failed or k == max_steps - 1
        rec = records[k]
        rec["state"] = state
        rec["action"] = action
        rec["next_state"] = next_state
        rec["reward"] = reward
        rec["components"] = components
        rec["terminal"] = terminal
        nox += inputs.m_nox
        soot += inputs.m_soot
        abs_dp += abs(inputs.delta_p)
        abs_dv += abs(ps.target_speed - ps.vehicle_speed)
        n += 1
        state = next_state
        if inputs.failed:
            failed = True
            break
    return EpisodeLog(
        records=records[:n],
        cumulative_nox=nox,
        cumulative_soot=soot,
        mean_abs_boost_error=abs_dp / n,
        mean_abs_speed_error=abs_dv / n,
        failure=failed,
        segment_start=float(segment_start),
    )


def collect_cycle(
    controller: Controller,
    plant: Plant,
    experiences_target: int,
    config: RolloutConfig,
    ranges: NormalizationRanges | None = None,
    on_episode: Callable[[np.ndarray], None] | None = None,
) -> list[EpisodeLog]:
    """Run episodes until ``experiences_target`` experiences are gathered.

    With an explicit segment plan and a target of 0, every planned segment
    is run to completion (the validation case). The final training episode
    is truncated so the cycle yields exactly the target count.
    ``on_episode`` receives each episode's packed records as it finishes.
    """
    ranges = ranges or NormalizationRanges()
    rng = np.random.default_rng(config.seed)
    episodes: list[EpisodeLog] = []
    length = config.episode_length_steps
    if config.segment_plan is not None and experiences_target == 0:
        for start in config.segment_plan:
            plant_seed = int(rng.integers(2**31))
            ep = rollout_episode(controller, plant, start, plant_seed, rng, config.weights, ranges, length)
            episodes.append(ep)
            if on_episode:
                on_episode(ep.records)
        return episodes
    collected = 0
    max_start = int(math.floor(plant.cycle.duration - EPISODE_SECONDS))
    plan = list(config.segment_plan or ())
    while collected < experiences_target:
        if plan:
            start = plan[len(episodes) % len(plan)]
        else:
            start = float(rng.integers(0, max_start + 1))
        plant_seed = int(rng.integers(2**31))
        steps = min(length, experiences_target - collected)
        ep = rollout_episode(controller, plant, start, plant_seed, rng, config.weights, ranges, steps)
        episodes.append(ep)
        collected += ep.steps
        if on_episode:
            on_episode(ep.records)
    return episodes


def concat_records(episodes: Sequence[EpisodeLog]) -> np.ndarray:
    if not episodes:
        return np.zeros(0, dtype=EXPERIENCE_DTYPE)
    return np.concatenate([ep.records for ep in episodes])


# -- network side -------------------------------------------------------------


@dataclass
class MinionSpec:
    """Everything a Minion needs to build its plant."""

    cycle: DriveCycle
    tier: TierConfig = field(default_factory=TierConfig.mil)
    plant_config: PlantConfig = field(default_factory=PlantConfig)
    ranges: NormalizationRanges = field(default_factory=NormalizationRanges)
    minion_id: str = "minion"


class InjectedFault(RuntimeError):
    """Raised by the fault hook to simulate a Minion crash mid-cycle."""


def run_command(snapshot: PolicySnapshot, cmd: RunCycle, spec: MinionSpec, plant: Plant, emit=None) -> list[EpisodeLog]:
    """Collect one cycle, passing each finished episode's records to ``emit``."""
    controller = PolicyController(snapshot, cmd.mode)
    config = RolloutConfig(
        mode=cmd.mode,
        seed=cmd.seed,
        tier=spec.tier,
        segment_plan=cmd.segment_plan,
        episode_length_steps=cmd.episode_length_steps,
        weights=RewardWeights(*cmd.weights),
    )
    return collect_cycle(controller, plant, cmd.experiences_target, config, spec.ranges, on_episode=emit)


def serve_minion(conn: Connection, spec: MinionSpec, fault_after_chunks: int | None = None) -> str:
    """Run the Minion side of one session until SHUTDOWN or disconnect.

    Rollouts run on a worker thread and hand packed records to this
    (session) thread through a queue. ``fault_after_chunks`` drops the
    connection after that many EXPERIENCES frames, for resilience tests.
    Returns the final session state name.
    """
    link = SessionConnection(conn, "minion")
    conn.start_heartbeat()
    link.send(Hello(spec.minion_id, spec.tier.tier, PROTOCOL_VERSION))
    reply = link.recv()
    if not isinstance(reply, Hello):
        link.close()
        return link.state.name
    plant = Plant(spec.cycle, spec.tier, spec.plant_config)
    snapshot = None
    sent_chunks = 0
    try:
        while True:
            msg = link.recv()
            if isinstance(msg, Shutdown):
                return link.state.name
            if isinstance(msg, Policy):
                try:
                    snapshot = deserialize(msg.snapshot)
                    PolicyController(snapshot, "validate")
                except (SnapshotError, ConfigError) as exc:
                    snapshot = None
                    link.send(Error(ErrorCode.BAD_POLICY, str(exc)))
                continue
            if not isinstance(msg, RunCycle):
                continue
            if snapshot is None:
                link.send(Error(ErrorCode.BAD_POLICY, "no usable policy for this cycle"))
                continue
            q: queue.Queue = queue.Queue(maxsize=64)
            result: dict = {}

            def produce(cmd=msg):
                try:
                    result["episodes"] = run_command(snapshot, cmd, spec, plant, q.put)
                except Exception as exc:  # reported to the Master, not swallowed
                    result["error"] = exc
                finally:
                    q.put(None)

            worker = threading.Thread(target=produce, daemon=True, name="rollout")
            worker.start()
            while (records := q.get()) is not None:
                for i in range(0, len(records), CHUNK_RECORDS):
                    if fault_after_chunks is not None and sent_chunks >= fault_after_chunks:
                        raise InjectedFault(f"fault injected after {sent_chunks} chunks")
                    link.send(Experiences(msg.cycle_id, records[i : i + CHUNK_RECORDS]))
                    sent_chunks += 1
            worker.join()
            if "error" in result:
                log.error("rollout failed: %s", result["error"])
                link.send(Error(ErrorCode.ROLLOUT_FAILED, str(result["error"])))
                continue
            link.send(CycleDone(msg.cycle_id, tuple(EpisodeSummary.of(ep) for ep in result["episodes"])))
    except InjectedFault:
        conn.close()
        raise
    finally:
        if not conn.closed:
            conn.close()


def connect(address: tuple[str, int], retry_for: float = 10.0, **conn_kwargs):
    """Open a :class:`~xilrl.protocol.Connection`, retrying while the Master starts."""
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection(address, timeout=5.0)
            return Connection(sock, **conn_kwargs)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.2)
