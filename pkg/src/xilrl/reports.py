"""Comparison tables and ledger summaries, computed from CSV files alone."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

from .config import ConfigError
from .master import CycleMetrics, RunLedger, convergence_cycles, entropy_decay, relative

HOUR = 3600.0


def save_baseline(path: str | Path, metrics: CycleMetrics) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = [f.name for f in fields(CycleMetrics)]
        w.writerow(names)
        w.writerow([repr(getattr(metrics, n)) for n in names])


def load_baseline(path: str | Path) -> CycleMetrics:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise ConfigError(f"{path}: a baseline file holds exactly one row, found {len(rows)}")
    try:
        return CycleMetrics(
            **{f.name: (int if f.type in ("int", int) else float)(rows[0][f.name]) for f in fields(CycleMetrics)}
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing baseline column {exc}") from None


def is_baseline_file(path: str | Path) -> bool:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    return "cycle" not in header and "nox" in header


@dataclass
class AgentRow:
    agent: str
    mil_iterations: int
    hil_iterations_to_max: int
    equivalent_hours: float
    max_reward: float
    rel_nox: float
    rel_soot: float
    rel_boost_error: float
    rel_speed_error: float


# column -> True when larger is better
_BEST = {
    "hil_iterations_to_max": False,
    "equivalent_hours": False,
    "max_reward": True,
    "rel_nox": False,
    "rel_soot": False,
    "rel_boost_error": False,
    "rel_speed_error": False,
}


def agent_row(name: str, ledger: RunLedger, baseline: CycleMetrics) -> AgentRow:
    """Best validated cycle of ``ledger`` against the baseline."""
    best = ledger.best()
    if best is None:
        raise ConfigError(f"ledger {name!r} has no validation rows")
    return AgentRow(
        agent=name,
        mil_iterations=best.source_cycle,
        hil_iterations_to_max=best.cycle,
        equivalent_hours=best.equivalent_time_s / HOUR,
        max_reward=best.validation_reward,
        rel_nox=relative(best.val_nox, baseline.nox),
        rel_soot=relative(best.val_soot, baseline.soot),
        rel_boost_error=relative(best.val_boost_error, baseline.mean_abs_boost_error),
        rel_speed_error=relative(best.val_speed_error, baseline.mean_abs_speed_error),
    )


def baseline_row(name: str, metrics: CycleMetrics, baseline: CycleMetrics) -> AgentRow:
    return AgentRow(
        agent=name,
        mil_iterations=0,
        hil_iterations_to_max=0,
        equivalent_hours=0.0,
        max_reward=metrics.reward,
        rel_nox=relative(metrics.nox, baseline.nox),
        rel_soot=relative(metrics.soot, baseline.soot),
        rel_boost_error=relative(metrics.mean_abs_boost_error, baseline.mean_abs_boost_error),
        rel_speed_error=relative(metrics.mean_abs_speed_error, baseline.mean_abs_speed_error),
    )


@dataclass
class ComparisonTable:
    rows: list[AgentRow]

    @property
    def columns(self) -> list[str]:
        return [f.name for f in fields(AgentRow)]

    def best(self, column: str) -> set[str]:
        """Agents holding the best value of ``column`` (ties all flagged)."""
        vals = [(r.agent, getattr(r, column)) for r in self.rows if not math.isnan(getattr(r, column))]
        if not vals:
            return set()
        pick = max if _BEST[column] else min
        top = pick(v for _, v in vals)
        return {a for a, v in vals if v == top}

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table; ``*`` marks the best entry of each scored column."""
        best = {c: self.best(c) for c in _BEST}
        cells = [self.columns]
        for r in self.rows:
            line = []
            for c in self.columns:
                v = getattr(r, c)
                s = f"{v:.3f}" if isinstance(v, float) else str(v)
                if c in best and r.agent in best[c]:
                    s += "*"
                line.append(s)
            cells.append(line)
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        return "\n".join("  ".join(s.rjust(w) for s, w in zip(row, widths)) for row in cells) + "\n"


def make_comparison_table(
    ledgers: Mapping[str, RunLedger | CycleMetrics] | Sequence[tuple[str, RunLedger | CycleMetrics]],
    baseline: CycleMetrics,
) -> ComparisonTable:
    """One row per agent; baselines may appear as agents (their Rel. values are 0)."""
    items = list(ledgers.items()) if isinstance(ledgers, Mapping) else list(ledgers)
    if not items:
        raise ValueError("no ledgers to compare")
    rows = []
    for name, item in items:
        if isinstance(item, CycleMetrics):
            rows.append(baseline_row(name, item, baseline))
        else:
            rows.append(agent_row(name, item, baseline))
    return ComparisonTable(rows)


def compare_files(paths: Sequence[str | Path], baseline_path: str | Path) -> ComparisonTable:
    baseline = load_baseline(baseline_path)
    items = []
    for p in paths:
        name = Path(p).parent.name if Path(p).name == "ledger.csv" else Path(p).stem
        items.append((name, load_baseline(p) if is_baseline_file(p) else RunLedger.load(p)))
    return make_comparison_table(items, baseline)


def find_ledgers(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if d.is_file():
        return [d]
    found = sorted(d.rglob("ledger.csv"))
    if not found:
        raise ConfigError(f"no ledger.csv under {d}")
    return found


def ledger_summary(paths: Sequence[str | Path]) -> str:
    """CSV with one line per ledger: convergence, best cycle and entropy trend."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ledger", "cycles", "best_cycle", "max_validation_reward", "convergence_cycles", "entropy_first_q", "entropy_last_q"])
    for p in paths:
        ledger = RunLedger.load(p)
        best = ledger.best()
        try:
            first, last = entropy_decay(ledger)
        except ValueError:
            first = last = math.nan
        conv = convergence_cycles(ledger)
        w.writerow(
            [
                str(p),
                len(ledger),
                best.cycle if best else "",
                repr(best.validation_reward) if best else "",
                "" if conv is None else conv,
                repr(first),
                repr(last),
            ]
        )
    return buf.getvalue()
