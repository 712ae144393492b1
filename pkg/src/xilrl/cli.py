"""Command-line entry point: master, minion, local and report roles."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .agent import SnapshotError
from .algo.ppo import TrainingDivergenceError
from .config import ConfigError, load_config
from .core import NormalizationRanges
from .master import (
    SWEEP_GRID,
    LoopbackCluster,
    MinionLostError,
    MinionPool,
    RemoteExecutor,
    TrainingPlan,
    TransferRejectedError,
    baseline_run,
    run_training,
    reward_sweep,
    transfer_policy,
)
from .minion import MinionSpec, connect, serve_minion
from .plant import DriveCycle, PlantConfig, TierConfig, synthetic_cycle
from .protocol import DEFAULT_PORT, ProtocolError, parse_address
from .reports import compare_files, find_ledgers, ledger_summary, save_baseline

log = logging.getLogger("xilrl")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_PROTOCOL = 4
EXIT_TRAINING = 5


def _grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xilrl", description=__doc__)
    p.add_argument("--seed", type=int, help="override the plan's seed")
    p.add_argument("--config", help="key = value file with plant, range and reward settings")
    p.add_argument("-v", "--verbose", action="store_true")
    roles = p.add_subparsers(dest="role", required=True)

    master = roles.add_parser("master", help="run the trainer and wait for Minions")
    mcmd = master.add_subparsers(dest="command", required=True)
    for name in ("train", "transfer", "sweep", "baseline"):
        sp = mcmd.add_parser(name)
        sp.add_argument("--plan", required=True, help="training plan file")
        sp.add_argument("--out", default="runs", help="output directory")
        if name != "baseline":
            sp.add_argument("--listen", default=f"0.0.0.0:{DEFAULT_PORT}", help="host:port to accept Minions on")
            sp.add_argument("--wait", type=float, default=300.0, help="seconds to wait for a Minion")
        if name in ("transfer", "sweep"):
            sp.add_argument("--from", dest="source", required=True, help="source .pol checkpoint")
        if name == "sweep":
            sp.add_argument("--grid", type=_grid, default=SWEEP_GRID, help="f_nox values, comma-separated")
    rep = mcmd.add_parser("report")
    rep.add_argument("--ledger", required=True, help="ledger file or directory of runs")

    minion = roles.add_parser("minion", help="connect to a Master and collect experiences")
    minion.add_argument("--connect", default=f"127.0.0.1:{DEFAULT_PORT}", help="Master host:port")
    minion.add_argument("--tier", default="mil", choices=("mil", "hil", "hil-ideal"))
    minion.add_argument("--cycle-file", help="drive cycle CSV (time_s,speed_kmh); built-in cycle if omitted")
    minion.add_argument("--plant-config", help="key = value file with plant.* and tier.* settings")
    minion.add_argument("--id", default="minion")

    local = roles.add_parser("local", help="Master and Minion in one process over loopback TCP")
    lcmd = local.add_subparsers(dest="command", required=True)
    for name in ("train", "transfer", "sweep", "baseline"):
        sp = lcmd.add_parser(name)
        sp.add_argument("--plan", help="training plan file")
        sp.add_argument("--algo", choices=("ppo", "ddpg"))
        sp.add_argument("--cycles", type=int)
        sp.add_argument("--experiences", type=int, help="experiences per cycle")
        sp.add_argument("--tier", choices=("mil", "hil", "hil-ideal"))
        sp.add_argument("--cycle-file")
        sp.add_argument("--out", default="runs")
        if name in ("transfer", "sweep"):
            sp.add_argument("--from", dest="source", required=True)
        if name == "sweep":
            sp.add_argument("--grid", type=_grid, default=SWEEP_GRID)

    report = roles.add_parser("report", help="comparison tables from ledger CSVs")
    g = report.add_mutually_exclusive_group(required=True)
    g.add_argument("--compare", nargs="+", metavar="LEDGER")
    g.add_argument("--ledger")
    report.add_argument("--baseline", help="baseline CSV (required with --compare)")
    report.add_argument("--out", help="write the table as CSV here")
    return p


def _values(args) -> dict[str, str]:
    values = load_config(args.config) if args.config else {}
    plan = getattr(args, "plan", None)
    if plan:
        values.update(load_config(plan))
    return values


def _plan(args, values: dict[str, str]) -> TrainingPlan:
    v = dict(values)
    for key, attr in (("algorithm", "algo"), ("total_cycles", "cycles"), ("experiences_per_cycle", "experiences"), ("tier", "tier"), ("cycle_file", "cycle_file")):
        if getattr(args, attr, None) is not None:
            v[key] = str(getattr(args, attr))
    if args.seed is not None:
        v["seed"] = str(args.seed)
    plan = TrainingPlan.from_config(v)
    if plan.checkpoint_dir is None:
        plan = replace(plan, checkpoint_dir=str(Path(args.out) / "checkpoints"))
    return plan


def _spec(plan: TrainingPlan, values: dict[str, str], minion_id: str = "local") -> MinionSpec:
    return MinionSpec(
        cycle=plan.drive_cycle(),
        tier=plan.tier,
        plant_config=PlantConfig.from_config(values),
        ranges=NormalizationRanges.from_config(values),
        minion_id=minion_id,
    )


def _dispatch(command: str, args, plan: TrainingPlan, executor, values) -> None:
    out = Path(args.out)
    if command == "train":
        run = run_training(plan, executor, ledger_path=out / "ledger.csv")
        print(f"{len(run.ledger)} cycles; ledger {out / 'ledger.csv'}")
    elif command == "transfer":
        run = transfer_policy(args.source, plan, executor, ledger_path=out / "ledger.csv")
        print(f"{len(run.ledger)} cycles; ledger {out / 'ledger.csv'}")
    elif command == "sweep":
        report = reward_sweep(args.source, args.grid, plan, executor, out_dir=out)
        print(report.to_csv_text(), end="")


def _baseline(args, plan: TrainingPlan, values) -> None:
    metrics, _ = baseline_run(plan, PlantConfig.from_config(values))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_baseline(out / "baseline.csv", metrics)
    print(f"baseline reward {metrics.reward:.4f}, NOx {metrics.nox:.3f} g, soot {metrics.soot:.4f} g -> {out / 'baseline.csv'}")


def cmd_master(args) -> None:
    if args.command == "report":
        print(ledger_summary(find_ledgers(args.ledger)), end="")
        return
    values = _values(args)
    plan = _plan(args, values)
    if args.command == "baseline":
        _baseline(args, plan, values)
        return
    host, port = parse_address(args.listen, default_host="0.0.0.0")
    pool = MinionPool(host, port)
    log.info("master listening on %s:%d", *pool.address)
    try:
        executor = RemoteExecutor(pool, plan.tier.tier, acquire_timeout=args.wait)
        _dispatch(args.command, args, plan, executor, values)
    finally:
        pool.close()


def cmd_minion(args) -> None:
    values = load_config(args.config) if args.config else {}
    if args.plant_config:
        values.update(load_config(args.plant_config))
    spec = MinionSpec(
        cycle=DriveCycle.from_csv(args.cycle_file) if args.cycle_file else synthetic_cycle(),
        tier=TierConfig.named(args.tier, values),
        plant_config=PlantConfig.from_config(values),
        ranges=NormalizationRanges.from_config(values),
        minion_id=args.id,
    )
    conn = connect(parse_address(args.connect))
    state = serve_minion(conn, spec)
    log.info("minion session ended in state %s", state)


def cmd_local(args) -> None:
    values = _values(args)
    plan = _plan(args, values)
    if args.command == "baseline":
        _baseline(args, plan, values)
        return
    with LoopbackCluster([_spec(plan, values)]) as cluster:
        _dispatch(args.command, args, plan, cluster.executor(plan.tier.tier), values)


def cmd_report(args) -> None:
    if args.ledger:
        print(ledger_summary(find_ledgers(args.ledger)), end="")
        return
    if not args.baseline:
        raise ConfigError("--compare needs --baseline")
    table = compare_files(args.compare, args.baseline)
    if args.out:
        Path(args.out).write_text(table.to_csv_text(), encoding="utf-8")
    print(table.to_text(), end="")


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"master": cmd_master, "minion": cmd_minion, "local": cmd_local, "report": cmd_report}
    try:
        handlers[args.role](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, MinionLostError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (TrainingDivergenceError, TransferRejectedError, SnapshotError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
