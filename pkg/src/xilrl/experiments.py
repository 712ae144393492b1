"""Multi-run studies: seed stability, MiL-to-HiL transfer speedup, reward sweeps.

Each study runs in-process through :class:`~xilrl.master.DirectExecutor`
(the loopback cluster gives identical ledgers, only slower) and returns
plain dataclasses that the scripts print and the acceptance suite checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .master import (
    SWEEP_GRID,
    CycleMetrics,
    DirectExecutor,
    Run,
    RunLedger,
    SweepReport,
    TrainingPlan,
    baseline_run,
    cycles_to_reach,
    entropy_decay,
    reward_sweep,
    run_training,
    transfer_policy,
)
from .agent import PolicySnapshot
from .minion import MinionSpec
from .plant import PlantConfig, TierConfig


def spec_for(plan: TrainingPlan, plant_config: PlantConfig | None = None) -> MinionSpec:
    return MinionSpec(plan.drive_cycle(), tier=plan.tier, plant_config=plant_config or PlantConfig())


def train(plan: TrainingPlan, out_dir: str | Path | None = None, plant_config: PlantConfig | None = None) -> Run:
    """One training run; with ``out_dir`` the ledger and checkpoints land there."""
    ledger_path = None
    if out_dir is not None:
        out = Path(out_dir)
        plan = replace(plan, checkpoint_dir=str(out / "checkpoints"))
        ledger_path = out / "ledger.csv"
    return run_training(plan, DirectExecutor(spec_for(plan, plant_config)), ledger_path=ledger_path)


def max_validation_reward(ledger: RunLedger) -> float:
    best = ledger.best()
    return best.validation_reward if best else math.nan


def failures_in_last(ledger: RunLedger, n: int = 10) -> int:
    """Training plus validation failure episodes over the final ``n`` cycles."""
    return sum(r.train_failures + r.val_failures for r in ledger.rows[-n:])


def entropy_decreased(ledger: RunLedger) -> bool:
    first, last = entropy_decay(ledger)
    return last < first


@dataclass
class SeedStudy:
    """Repeated runs of one algorithm that differ only in seed."""

    algorithm: str
    runs: dict[int, Run] = field(default_factory=dict)

    @property
    def max_rewards(self) -> list[float]:
        return [max_validation_reward(r.ledger) for r in self.runs.values()]

    @property
    def std(self) -> float:
        return float(np.std(self.max_rewards))


def seed_study(plan: TrainingPlan, seeds: Sequence[int], out_dir: str | Path | None = None) -> SeedStudy:
    study = SeedStudy(plan.algorithm)
    for s in seeds:
        sub = None if out_dir is None else Path(out_dir) / f"{plan.algorithm.lower()}_seed{s}"
        study.runs[s] = train(replace(plan, seed=s), sub)
    return study


@dataclass
class DominanceCheck:
    """Best validated cycle of a run against the reference controller."""

    baseline: CycleMetrics
    best_nox: float
    best_soot: float
    late_failures: int

    @property
    def beats_reference(self) -> bool:
        return self.best_nox < self.baseline.nox and self.best_soot < self.baseline.soot


def dominance(run: Run, plan: TrainingPlan, plant_config: PlantConfig | None = None) -> DominanceCheck:
    base, _ = baseline_run(plan, plant_config)
    best = run.ledger.best()
    return DominanceCheck(base, best.val_nox, best.val_soot, failures_in_last(run.ledger, 10))


@dataclass
class TransferStudy:
    """Pure-HiL training against fine-tuning a MiL checkpoint on HiL."""

    scratch: Run
    transfer: Run
    target: float  # the pure-HiL run's max validation reward
    scratch_cycles: int | None
    transfer_cycles: int | None

    @property
    def speedup(self) -> float:
        if self.transfer_cycles is None:
            return 0.0
        if self.scratch_cycles is None:
            return math.inf
        return self.scratch_cycles / self.transfer_cycles


def transfer_study(
    source: PolicySnapshot,
    hil_plan: TrainingPlan,
    transfer_cycles: int | None = None,
    tolerance: float = 0.05,
    out_dir: str | Path | None = None,
    scratch: Run | None = None,
) -> TransferStudy:
    """Both arms on ``hil_plan``'s tier; cycles are HiL cycles needed to come within ``tolerance`` of the scratch max."""
    out = None if out_dir is None else Path(out_dir)
    if scratch is None:
        scratch = train(hil_plan, None if out is None else out / "hil_scratch")
    target = max_validation_reward(scratch.ledger)
    t_plan = hil_plan if transfer_cycles is None else replace(hil_plan, total_cycles=transfer_cycles)
    ledger_path = None
    if out is not None:
        t_plan = replace(t_plan, checkpoint_dir=str(out / "hil_transfer" / "checkpoints"))
        ledger_path = out / "hil_transfer" / "ledger.csv"
    transferred = transfer_policy(source, t_plan, DirectExecutor(spec_for(t_plan)), ledger_path=ledger_path)
    return TransferStudy(
        scratch=scratch,
        transfer=transferred,
        target=target,
        scratch_cycles=cycles_to_reach(scratch.ledger, target, tolerance),
        transfer_cycles=cycles_to_reach(transferred.ledger, target, tolerance),
    )


def sweep(
    source: PolicySnapshot,
    plan: TrainingPlan,
    grid: Sequence[float] = SWEEP_GRID,
    out_dir: str | Path | None = None,
) -> SweepReport:
    return reward_sweep(source, grid, plan, DirectExecutor(spec_for(plan)), out_dir=out_dir)


def nox_non_increasing(report: SweepReport) -> bool:
    """Final validation NOx never rises as f_nox grows."""
    by_factor = sorted(report.entries, key=lambda e: e.f_nox)
    nox = [e.final.nox for e in by_factor]
    return all(b <= a for a, b in zip(nox, nox[1:]))


def hil_plan(plan: TrainingPlan, **tier_overrides) -> TrainingPlan:
    return replace(plan, tier=TierConfig.hil(**tier_overrides))

