"""Transfer one checkpoint under each NOx weight of a grid and rank the outcomes.

    python3 scripts/reward_sweep.py --from runs/stability/ppo_seed0/checkpoints/cycle_0150.pol --out runs/sweep
"""

import argparse
import logging

from xilrl.experiments import nox_non_increasing, sweep
from xilrl.master import SWEEP_GRID, TrainingPlan, load_checkpoint
from xilrl.plant import TierConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--grid", default=",".join(map(str, SWEEP_GRID)))
    p.add_argument("--cycles", type=int, default=20, help="HiL cycles per setting")
    p.add_argument("--experiences", type=int, default=9200)
    p.add_argument("--tier", default="hil", choices=("mil", "hil"))
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    source = load_checkpoint(args.source)
    plan = TrainingPlan(
        algorithm=source.algorithm,
        total_cycles=args.cycles,
        validation_every=args.cycles,
        experiences_per_cycle=args.experiences,
        tier=TierConfig.named(args.tier),
    )
    report = sweep(source, plan, [float(x) for x in args.grid.split(",")], args.out)
    print(report.to_csv_text(), end="")
    print(f"NOx non-increasing in f_nox: {nox_non_increasing(report)}")


if __name__ == "__main__":
    main()
