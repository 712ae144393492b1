"""Orchestration: training plans, cycle execution, ledgers and checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import math
import os
import queue
import socket
import tempfile
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .agent import PolicySnapshot, deserialize, serialize
from .algo.ddpg import DdpgConfig, DdpgTrainer
from .algo.ppo import PpoConfig, PpoTrainer, TrainingDivergenceError
from .config import ConfigError, apply_overrides, dump_config
from .core import EXPERIENCE_DTYPE, SAMPLE_TIME, EpisodeSummary, RewardWeights
from .minion import EPISODE_STEPS, MinionSpec, ReferenceController, RolloutConfig, collect_cycle, connect, run_command, serve_minion
from .plant import DriveCycle, Plant, TierConfig, synthetic_cycle, validation_segments
from .protocol import (
    PROTOCOL_VERSION,
    Connection,
    ConnectionClosedError,
    CycleDone,
    Error,
    ErrorCode,
    Experiences,
    Hello,
    PeerTimeoutError,
    Policy,
    ProtocolError,
    ProtocolViolationError,
    RemoteError,
    RunCycle,
    SessionConnection,
    Shutdown,
)

log = logging.getLogger(__name__)

MIL_TIME_FACTOR = 7.5
SWEEP_GRID = (0.215, 0.28, 0.32, 0.38, 0.40)


class TransferRejectedError(ValueError):
    """The checkpoint's network does not fit the target plan."""


class MinionLostError(ProtocolError):
    """A Minion vanished or misbehaved mid-cycle."""


# -- plan -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingPlan:
    algorithm: str = "PPO"
    total_cycles: int = 150
    validation_every: int = 5
    weights: RewardWeights = field(default_factory=RewardWeights)
    tier: TierConfig = field(default_factory=TierConfig.mil)
    seed: int = 0
    checkpoint_dir: str | None = None
    resume_from: str | None = None
    equivalent_time_factor: float = MIL_TIME_FACTOR  # applies to MiL only
    experiences_per_cycle: int | None = None  # None: the algorithm's own setting
    validation_seed: int = 12345
    save_at: tuple[int, ...] = ()
    cycle_file: str | None = None
    ppo: PpoConfig = field(default_factory=PpoConfig)
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)

    def __post_init__(self):
        object.__setattr__(self, "algorithm", self.algorithm.upper())
        if self.algorithm not in ("PPO", "DDPG"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.total_cycles < 1 and self.resume_from is None:
            raise ConfigError("total_cycles must be >= 1")
        if self.validation_every < 1:
            raise ConfigError("validation_every must be >= 1")
        if self.equivalent_time_factor <= 0:
            raise ConfigError("equivalent_time_factor must be > 0")

    @property
    def algo_config(self) -> PpoConfig | DdpgConfig:
        n = self.experiences_per_cycle
        if self.algorithm == "PPO":
            cfg = self.ppo
            if n is not None:
                cfg = replace(cfg, experiences_per_cycle=n, train_batch=n, sgd_minibatch=min(cfg.sgd_minibatch, n))
            return cfg
        return self.ddpg if n is None else replace(self.ddpg, experiences_per_cycle=n)

    @property
    def time_factor(self) -> float:
        return self.equivalent_time_factor if self.tier.tier == "mil" else 1.0

    def drive_cycle(self) -> DriveCycle:
        return DriveCycle.from_csv(self.cycle_file) if self.cycle_file else synthetic_cycle()

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "TrainingPlan":
        kw = {}
        for key in ("algorithm", "checkpoint_dir", "resume_from", "cycle_file"):
            if key in values:
                kw[key] = values[key]
        for key in ("total_cycles", "validation_every", "seed", "experiences_per_cycle", "validation_seed"):
            if key in values:
                kw[key] = int(values[key])
        if "equivalent_time_factor" in values:
            kw["equivalent_time_factor"] = float(values["equivalent_time_factor"])
        if values.get("save_at"):
            kw["save_at"] = tuple(int(x) for x in values["save_at"].split(","))
        try:
            return cls(
                weights=RewardWeights.from_config(values),
                tier=TierConfig.named(values.get("tier", "mil"), values),
                ppo=apply_overrides(PpoConfig(), values, "ppo."),
                ddpg=apply_overrides(DdpgConfig(), values, "ddpg."),
                **kw,
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_config(self) -> dict:
        out = {
            "algorithm": self.algorithm,
            "total_cycles": self.total_cycles,
            "validation_every": self.validation_every,
            "tier": self.tier.tier,
            "seed": self.seed,
            "equivalent_time_factor": self.equivalent_time_factor,
            "validation_seed": self.validation_seed,
        }
        for key in ("checkpoint_dir", "resume_from", "experiences_per_cycle", "cycle_file"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.save_at:
            out["save_at"] = ",".join(map(str, self.save_at))
        out.update(asdict(self.weights))
        for f in fields(self.tier):
            out[f"tier.{f.name}"] = getattr(self.tier, f.name)
        for prefix, cfg in (("ppo.", self.ppo), ("ddpg.", self.ddpg)):
            for f in fields(cfg):
                out[prefix + f.name] = getattr(cfg, f.name)
        return out

    @property
    def plan_hash(self) -> str:
        return hashlib.sha256(dump_config(self.to_config()).encode()).hexdigest()[:16]


def cycle_seed(seed: int, cycle: int) -> int:
    """Per-cycle rollout seed, independent across (seed, cycle) pairs."""
    return int(np.random.SeedSequence([seed, cycle]).generate_state(1, np.uint64)[0] >> 1)


def make_trainer(plan: TrainingPlan, snapshot: PolicySnapshot | None = None):
    cfg = plan.algo_config
    cls = PpoTrainer if plan.algorithm == "PPO" else DdpgTrainer
    if snapshot is None:
        return cls(cfg, seed=plan.seed)
    if tuple(snapshot.mlp.sizes) != tuple(cfg.policy_sizes):
        raise TransferRejectedError(f"checkpoint layers {snapshot.mlp.sizes} do not match plan layers {cfg.policy_sizes}")
    if snapshot.algorithm != plan.algorithm:
        raise TransferRejectedError(f"checkpoint is {snapshot.algorithm}, plan trains {plan.algorithm}")
    return cls.from_snapshot(snapshot, cfg, seed=plan.seed)


# -- metrics ----------------------------------------------------------------


@dataclass(frozen=True)
class CycleMetrics:
    """Aggregate of a set of episodes (a validation cycle or a baseline)."""

    reward: float  # mean episode reward
    nox: float  # g, summed over episodes
    soot: float  # g, summed over episodes
    mean_abs_boost_error: float  # kPa, step-weighted
    mean_abs_speed_error: float  # km/h, step-weighted
    failures: int
    steps: int

    @classmethod
    def of(cls, summaries: Sequence[EpisodeSummary]) -> "CycleMetrics":
        if not summaries:
            raise ValueError("no episodes to aggregate")
        steps = sum(s.steps for s in summaries)
        return cls(
            reward=float(np.mean([s.total_reward for s in summaries])),
            nox=float(sum(s.nox for s in summaries)),
            soot=float(sum(s.soot for s in summaries)),
            mean_abs_boost_error=sum(s.mean_abs_boost_error * s.steps for s in summaries) / steps,
            mean_abs_speed_error=sum(s.mean_abs_speed_error * s.steps for s in summaries) / steps,
            failures=sum(bool(s.failed) for s in summaries),
            steps=steps,
        )


def relative(value: float, reference: float) -> float:
    """Percent change against the reference; 0 for the reference itself."""
    if value == reference:
        return 0.0
    if reference == 0:
        return math.nan
    return (value - reference) / reference * 100.0


# -- ledger -----------------------------------------------------------------

_NAN = math.nan


@dataclass
class LedgerRow:
    cycle: int
    source_cycle: int = 0  # training cycles of the transferred checkpoint
    mean_train_reward: float = _NAN  # per 1500-step episode equivalent
    train_failures: int = 0
    validation_reward: float = _NAN
    val_nox: float = _NAN
    val_soot: float = _NAN
    val_boost_error: float = _NAN
    val_speed_error: float = _NAN
    val_failures: int = 0
    entropy: float = _NAN
    kl: float = _NAN
    policy_loss: float = _NAN
    value_loss: float = _NAN
    equivalent_time_s: float = 0.0  # cumulative
    diverged: int = 0

    @property
    def validated(self) -> bool:
        return not math.isnan(self.validation_reward)


_ROW_FIELDS = [f.name for f in fields(LedgerRow)]
_INT_FIELDS = {f.name for f in fields(LedgerRow) if f.type in ("int", int)}


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class RunLedger:
    """Append-only per-cycle metrics of one run."""

    def __init__(self, rows: Iterable[LedgerRow] = ()):
        self.rows: list[LedgerRow] = []
        for r in rows:
            self.append(r)

    def __len__(self):
        return len(self.rows)

    def append(self, row: LedgerRow) -> None:
        if self.rows and row.cycle <= self.rows[-1].cycle:
            raise ValueError(f"ledger rows must have increasing cycles ({row.cycle} after {self.rows[-1].cycle})")
        self.rows.append(row)

    @property
    def validation_rows(self) -> list[LedgerRow]:
        return [r for r in self.rows if r.validated]

    @property
    def max_train_reward(self) -> float:
        vals = [r.mean_train_reward for r in self.rows if not math.isnan(r.mean_train_reward)]
        return max(vals) if vals else _NAN

    def best(self) -> LedgerRow | None:
        """Row with the highest validation reward; the earlier one wins ties."""
        best = None
        for r in self.validation_rows:
            if best is None or r.validation_reward > best.validation_reward:
                best = r
        return best

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_ROW_FIELDS)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, k) for k in _ROW_FIELDS)])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        _atomic_write(Path(path), self.to_csv_text().encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "RunLedger":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"cycle", "validation_reward"} - set(reader.fieldnames or ())
            if missing:
                raise ConfigError(f"{path}: not a run ledger (missing {sorted(missing)})")
            rows = []
            for rec in reader:
                kw = {}
                for k in _ROW_FIELDS:
                    if k in rec and rec[k] != "":
                        kw[k] = int(rec[k]) if k in _INT_FIELDS else float(rec[k])
                rows.append(LedgerRow(**kw))
        return cls(rows)


def convergence_cycles(ledger: RunLedger, tolerance: float = 0.05) -> int | None:
    """First validated cycle within ``tolerance`` of the highest mean training reward.

    Compares validation against *training* reward as the rule is stated;
    None means the run never converged.
    """
    target = ledger.max_train_reward
    if math.isnan(target):
        return None
    return cycles_to_reach(ledger, target, tolerance)


def cycles_to_reach(ledger: RunLedger, target: float, tolerance: float = 0.05) -> int | None:
    """First validated cycle whose reward is within ``tolerance`` of ``target`` (sign-aware)."""
    threshold = target - tolerance * abs(target)
    for r in ledger.validation_rows:
        if r.validation_reward >= threshold:
            return r.cycle
    return None


def entropy_decay(ledger: RunLedger) -> tuple[float, float]:
    """Mean entropy over the first and the last quartile of cycles."""
    ent = ledger.column("entropy")
    ent = ent[~np.isnan(ent)]
    if len(ent) < 4:
        raise ValueError("need at least 4 cycles for quartiles")
    q = len(ent) // 4
    return float(ent[:q].mean()), float(ent[-q:].mean())


# -- checkpoints ------------------------------------------------------------


def checkpoint_path(directory: str | Path, cycle: int) -> Path:
    return Path(directory) / f"cycle_{cycle:04d}.pol"


def save_checkpoint(directory: str | Path, snapshot: PolicySnapshot, plan: TrainingPlan, tag: str = "") -> Path:
    """Write ``cycle_NNNN.pol`` and its ``.meta`` sidecar, each atomically."""
    path = checkpoint_path(directory, snapshot.training_cycle)
    _atomic_write(path, serialize(snapshot))
    meta = {
        "cycle": snapshot.training_cycle,
        "algorithm": snapshot.algorithm,
        "plan_hash": plan.plan_hash,
        "seed": plan.seed,
        "validation_seed": plan.validation_seed,
        "tier": plan.tier.tier,
    }
    if tag:
        meta["tag"] = tag
    _atomic_write(path.with_suffix(".meta"), dump_config(meta).encode())
    return path


def load_checkpoint(path: str | Path) -> PolicySnapshot:
    return deserialize(Path(path).read_bytes())


def maturity_tag(cycle: int, save_at: Sequence[int]) -> str:
    """Letters A, B, ... for the cycles listed in ``save_at``."""
    return chr(ord("A") + list(save_at).index(cycle)) if cycle in save_at else ""


# -- cycle execution ----------------------------------------------------------


@dataclass
class CycleResult:
    records: np.ndarray
    summaries: tuple[EpisodeSummary, ...]
    attempts: int = 1
    discarded: int = 0  # records thrown away from failed attempts


class CycleExecutor(Protocol):
    def run(self, snapshot: PolicySnapshot, cmd: RunCycle) -> CycleResult: ...


class DirectExecutor:
    """Runs commands in-process, bypassing the wire."""

    def __init__(self, spec: MinionSpec):
        self.spec = spec
        self.plant = Plant(spec.cycle, spec.tier, spec.plant_config)

    def run(self, snapshot: PolicySnapshot, cmd: RunCycle) -> CycleResult:
        snapshot = deserialize(serialize(snapshot))  # same bytes a Minion would see
        episodes = run_command(snapshot, cmd, self.spec, self.plant)
        records = np.concatenate([ep.records for ep in episodes]) if episodes else np.zeros(0, EXPERIENCE_DTYPE)
        return CycleResult(records, tuple(EpisodeSummary.of(ep) for ep in episodes))


class MinionLink:
    """Master side of one handshaken Minion connection."""

    def __init__(self, link: SessionConnection, hello: Hello):
        self.link = link
        self.minion_id = hello.minion_id
        self.tier = hello.tier

    def run_cycle(self, policy_bytes: bytes, cmd: RunCycle) -> CycleResult:
        """Send POLICY + RUN_CYCLE and gather the cycle.

        Raises :class:`MinionLostError` when the link fails; the records of
        the failed attempt are reported through the exception.
        """
        chunks: list[np.ndarray] = []
        try:
            self.link.send(Policy(policy_bytes))
            self.link.send(cmd)
            while True:
                msg = self.link.recv()
                if isinstance(msg, Experiences):
                    chunks.append(msg.records)
                elif isinstance(msg, CycleDone):
                    break
                elif isinstance(msg, Error):
                    raise RemoteError(msg.code, msg.text)
        except (ConnectionClosedError, PeerTimeoutError, ProtocolViolationError, OSError) as exc:
            err = MinionLostError(f"minion {self.minion_id} lost during cycle {cmd.cycle_id}: {exc}")
            err.partial = sum(len(c) for c in chunks)
            raise err from exc
        records = np.concatenate(chunks) if chunks else np.zeros(0, EXPERIENCE_DTYPE)
        if cmd.mode == "train" and len(records) != cmd.experiences_target:
            raise ProtocolViolationError(f"cycle {cmd.cycle_id}: got {len(records)} of {cmd.experiences_target} experiences")
        return CycleResult(records, msg.summaries)

    def shutdown(self) -> None:
        try:
            self.link.send(Shutdown())
        except ProtocolError:
            pass
        self.link.close()


class MinionPool:
    """Listening socket plus the handshaken Minions waiting for work."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        heartbeat_interval: float = 5.0,
        peer_timeout: float = 30.0,
    ):
        self._server = socket.create_server((host, port))
        self._server.settimeout(0.2)
        self._idle: "queue.Queue[MinionLink]" = queue.Queue()
        self._links: list[MinionLink] = []
        self._stop = threading.Event()
        self._conn_kwargs = dict(heartbeat_interval=heartbeat_interval, peer_timeout=peer_timeout)
        self._thread = threading.Thread(target=self._accept_loop, daemon=True, name="minion-pool")
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()[:2]

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._handshake, args=(sock,), daemon=True).start()

    def _handshake(self, sock: socket.socket) -> None:
        conn = Connection(sock, **self._conn_kwargs)
        link = SessionConnection(conn, "master")
        try:
            hello = link.recv()
            if not isinstance(hello, Hello):
                raise ProtocolViolationError("expected HELLO")
            if hello.protocol_version != PROTOCOL_VERSION:
                link.send(Error(ErrorCode.VERSION_MISMATCH, f"master speaks version {PROTOCOL_VERSION}"))
                link.close()
                return
            link.send(Hello("master", hello.tier, PROTOCOL_VERSION))
        except ProtocolError as exc:
            log.warning("handshake failed: %s", exc)
            link.close()
            return
        conn.start_heartbeat()
        m = MinionLink(link, hello)
        self._links.append(m)
        log.info("minion %s (%s) connected", m.minion_id, m.tier)
        self._idle.put(m)

    def acquire(self, tier: str | None = None, timeout: float = 60.0) -> MinionLink:
        """An idle Minion of ``tier``, waiting up to ``timeout`` for one to connect."""
        deadline = threading.Event()
        timer = threading.Timer(timeout, deadline.set)
        timer.start()
        skipped = []
        try:
            while not deadline.is_set():
                try:
                    m = self._idle.get(timeout=0.1)
                except queue.Empty:
                    continue
                if m.link.conn.closed:
                    continue
                if tier is None or m.tier == tier:
                    return m
                skipped.append(m)
            raise MinionLostError(f"no {tier or 'any'}-tier minion available within {timeout} s")
        finally:
            timer.cancel()
            for m in skipped:
                self._idle.put(m)

    def release(self, m: MinionLink) -> None:
        self._idle.put(m)

    def close(self) -> None:
        self._stop.set()
        for m in self._links:
            if not m.link.conn.closed:
                m.shutdown()
        self._server.close()
        self._thread.join(timeout=2)


class RemoteExecutor:
    """Runs commands on pooled Minions; reassigns a cycle when its Minion is lost.

    A re-issued cycle keeps its cycle_id and seed, so the replacement
    Minion produces the same experiences; anything received from the lost
    attempt is discarded rather than counted.
    """

    def __init__(self, pool: MinionPool, tier: str | None = None, max_attempts: int = 5, acquire_timeout: float = 60.0):
        self.pool = pool
        self.tier = tier
        self.max_attempts = max_attempts
        self.acquire_timeout = acquire_timeout
        self.failed_attempts: list[tuple[int, int]] = []  # (cycle_id, discarded records)

    def run(self, snapshot: PolicySnapshot, cmd: RunCycle) -> CycleResult:
        policy = serialize(snapshot)
        discarded = 0
        for attempt in range(1, self.max_attempts + 1):
            m = self.pool.acquire(self.tier, self.acquire_timeout)
            try:
                result = m.run_cycle(policy, cmd)
            except MinionLostError as exc:
                log.warning("%s; reassigning (attempt %d)", exc, attempt)
                lost = getattr(exc, "partial", 0)
                discarded += lost
                self.failed_attempts.append((cmd.cycle_id, lost))
                m.link.close()
                continue
            self.pool.release(m)
            result.attempts = attempt
            result.discarded = discarded
            return result
        raise MinionLostError(f"cycle {cmd.cycle_id} failed {self.max_attempts} times")


class LoopbackCluster:
    """Master pool plus in-process Minion threads talking over 127.0.0.1.

    ``faults`` maps a Minion index to the number of EXPERIENCES frames it
    sends before dropping its connection once; it then reconnects.
    """

    def __init__(self, specs: Sequence[MinionSpec], faults: Mapping[int, int] | None = None, **pool_kwargs):
        self.pool = MinionPool("127.0.0.1", 0, **pool_kwargs)
        self.specs = list(specs)
        self.faults = dict(faults or {})
        self.errors: list[BaseException] = []
        self._threads = [
            threading.Thread(target=self._minion_main, args=(i, s), daemon=True, name=f"minion-{i}")
            for i, s in enumerate(self.specs)
        ]
        for t in self._threads:
            t.start()

    def _minion_main(self, index: int, spec: MinionSpec) -> None:
        from .minion import InjectedFault

        fault = self.faults.pop(index, None)
        while True:
            try:
                conn = connect(self.pool.address, **self.pool._conn_kwargs)
                state = serve_minion(conn, spec, fault_after_chunks=fault)
            except InjectedFault:
                fault = None
                continue
            except ProtocolError as exc:
                if self.pool._stop.is_set():
                    return
                self.errors.append(exc)
                return
            except OSError:
                return
            if state == "CLEAN_SHUTDOWN":
                return

    def executor(self, tier: str | None = None) -> RemoteExecutor:
        return RemoteExecutor(self.pool, tier)

    def close(self) -> None:
        self.pool.close()
        for t in self._threads:
            t.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- training ---------------------------------------------------------------


@dataclass
class Run:
    """Outcome of :func:`run_training`."""

    ledger: RunLedger
    trainer: object
    snapshot: PolicySnapshot
    checkpoints: list[Path] = field(default_factory=list)


def validation_command(plan: TrainingPlan, cycle_id: int) -> RunCycle:
    return RunCycle(
        cycle_id=cycle_id,
        mode="validate",
        experiences_target=0,
        seed=plan.validation_seed,
        segment_plan=tuple(validation_segments(plan.drive_cycle())),
        weights=plan.weights.as_tuple(),
        episode_length_steps=EPISODE_STEPS,
    )


def validate(snapshot: PolicySnapshot, plan: TrainingPlan, executor: CycleExecutor, cycle_id: int = 0) -> CycleMetrics:
    """Deterministic mean-action rollout over the fixed validation segments."""
    result = executor.run(snapshot, validation_command(plan, cycle_id))
    return CycleMetrics.of(result.summaries)


def run_training(
    plan: TrainingPlan,
    executor: CycleExecutor,
    trainer=None,
    start_cycle: int = 0,
    source_cycle: int = 0,
    ledger_path: str | Path | None = None,
) -> Run:
    """Train ``plan.total_cycles - start_cycle`` cycles and return the ledger.

    Every cycle writes a checkpoint when ``plan.checkpoint_dir`` is set;
    validation runs every ``validation_every`` cycles and after the last.
    """
    if trainer is None:
        snap = load_checkpoint(plan.resume_from) if plan.resume_from else None
        trainer = make_trainer(plan, snap)
        if snap is not None:
            start_cycle = snap.training_cycle
    cfg = plan.algo_config
    n_exp = cfg.experiences_per_cycle
    ledger = RunLedger()
    checkpoints: list[Path] = []
    command_id = 0
    elapsed = 0.0
    snapshot = trainer.snapshot(start_cycle)

    def record_validation(row: LedgerRow, snap: PolicySnapshot) -> float:
        nonlocal command_id
        command_id += 1
        m = validate(snap, plan, executor, command_id)
        row.validation_reward = m.reward
        row.val_nox, row.val_soot = m.nox, m.soot
        row.val_boost_error, row.val_speed_error = m.mean_abs_boost_error, m.mean_abs_speed_error
        row.val_failures = m.failures
        return m.steps * SAMPLE_TIME

    if start_cycle >= plan.total_cycles:
        row = LedgerRow(cycle=start_cycle, source_cycle=source_cycle, entropy=trainer.entropy)
        elapsed += record_validation(row, snapshot) / plan.time_factor
        row.equivalent_time_s = elapsed
        ledger.append(row)
    for cycle in range(start_cycle + 1, plan.total_cycles + 1):
        command_id += 1
        cmd = RunCycle(
            cycle_id=command_id,
            mode="train",
            experiences_target=n_exp,
            seed=cycle_seed(plan.seed, cycle),
            segment_plan=None,
            weights=plan.weights.as_tuple(),
            episode_length_steps=EPISODE_STEPS,
        )
        result = executor.run(snapshot, cmd)
        records = result.records
        if len(records) != n_exp:
            raise ProtocolViolationError(f"cycle {cycle}: {len(records)} experiences, expected {n_exp}")
        backup = copy.deepcopy(trainer)
        diverged = 0
        try:
            stats = trainer.update(records)
        except TrainingDivergenceError as exc:
            log.error("cycle %d diverged (%s); restoring the previous checkpoint", cycle, exc)
            trainer, stats, diverged = backup, {"entropy": backup.entropy}, 1
        snapshot = trainer.snapshot(cycle)
        sim_s = len(records) * SAMPLE_TIME
        row = LedgerRow(
            cycle=cycle,
            source_cycle=source_cycle,
            mean_train_reward=float(np.sum(records["reward"], dtype=np.float64)) / len(records) * EPISODE_STEPS,
            train_failures=sum(bool(s.failed) for s in result.summaries),
            entropy=stats.get("entropy", _NAN),
            kl=stats.get("kl", _NAN),
            policy_loss=stats.get("policy_loss", stats.get("actor_loss", _NAN)),
            value_loss=stats.get("vf_loss", stats.get("critic_loss", _NAN)),
            diverged=diverged,
        )
        if cycle % plan.validation_every == 0 or cycle == plan.total_cycles:
            sim_s += record_validation(row, snapshot)
        elapsed += sim_s / plan.time_factor
        row.equivalent_time_s = elapsed
        ledger.append(row)
        if plan.checkpoint_dir:
            checkpoints.append(save_checkpoint(plan.checkpoint_dir, snapshot, plan, maturity_tag(cycle, plan.save_at)))
        if ledger_path:
            ledger.save(ledger_path)
        log.info(
            "cycle %d train %.3f val %s entropy %.4f",
            cycle,
            row.mean_train_reward,
            f"{row.validation_reward:.3f}" if row.validated else "-",
            row.entropy,
        )
    if ledger_path:
        ledger.save(ledger_path)
    return Run(ledger, trainer, snapshot, checkpoints)


def transfer_policy(
    source: str | Path | PolicySnapshot,
    plan: TrainingPlan,
    executor: CycleExecutor,
    ledger_path: str | Path | None = None,
) -> Run:
    """Continue training from a checkpoint's actor under a new plan.

    The critic starts fresh; HiL cycles are counted from zero, and the
    source's training cycle is recorded in every ledger row.
    """
    snap = source if isinstance(source, PolicySnapshot) else load_checkpoint(source)
    trainer = make_trainer(plan, snap)
    return run_training(plan, executor, trainer, start_cycle=0, source_cycle=snap.training_cycle, ledger_path=ledger_path)


def baseline_run(plan: TrainingPlan, plant_config=None) -> tuple[CycleMetrics, tuple[EpisodeSummary, ...]]:
    """The map-based reference controller over the validation segments."""
    cycle = plan.drive_cycle()
    plant = Plant(cycle, plan.tier, plant_config)
    cfg = RolloutConfig(
        mode="validate",
        seed=plan.validation_seed,
        tier=plan.tier,
        segment_plan=tuple(validation_segments(cycle)),
        weights=plan.weights,
    )
    episodes = collect_cycle(ReferenceController(), plant, 0, cfg)
    summaries = tuple(EpisodeSummary.of(ep) for ep in episodes)
    return CycleMetrics.of(summaries), summaries


@dataclass
class SweepEntry:
    f_nox: float
    final: CycleMetrics
    best_reward: float
    ledger_path: Path | None
    beats_reference: bool


@dataclass
class SweepReport:
    entries: list[SweepEntry]
    baseline: CycleMetrics

    def ranked(self) -> list[SweepEntry]:
        """Settings under the reference on both pollutants first, then by reward."""
        return sorted(self.entries, key=lambda e: (not e.beats_reference, -e.final.reward))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "f_nox", "reward", "nox", "soot", "rel_nox", "rel_soot", "beats_reference"])
        for rank, e in enumerate(self.ranked(), 1):
            w.writerow(
                [
                    rank,
                    e.f_nox,
                    repr(e.final.reward),
                    repr(e.final.nox),
                    repr(e.final.soot),
                    repr(relative(e.final.nox, self.baseline.nox)),
                    repr(relative(e.final.soot, self.baseline.soot)),
                    int(e.beats_reference),
                ]
            )
        return buf.getvalue()


def reward_sweep(
    source: str | Path | PolicySnapshot,
    grid: Sequence[float],
    plan: TrainingPlan,
    executor: CycleExecutor,
    out_dir: str | Path | None = None,
) -> SweepReport:
    """One transfer run per NOx factor; every run starts from the same checkpoint and seeds."""
    if not grid:
        raise ConfigError("empty f_nox grid")
    baseline, _ = baseline_run(plan)
    entries = []
    for f_nox in grid:
        p = replace(plan, weights=replace(plan.weights, f_nox=float(f_nox)))
        path = None
        if out_dir:
            sub = Path(out_dir) / f"f_nox_{f_nox:g}"
            p = replace(p, checkpoint_dir=str(sub))
            path = sub / "ledger.csv"
        run = transfer_policy(source, p, executor, ledger_path=path)
        final = validate(run.snapshot, p, executor)
        best = run.ledger.best()
        entries.append(
            SweepEntry(
                f_nox=float(f_nox),
                final=final,
                best_reward=best.validation_reward if best else final.reward,
                ledger_path=path,
                beats_reference=final.nox < baseline.nox and final.soot < baseline.soot,
            )
        )
    report = SweepReport(entries, baseline)
    if out_dir:
        _atomic_write(Path(out_dir) / "sweep.csv", report.to_csv_text().encode())
    return report
