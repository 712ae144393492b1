"""PPO against DDPG over repeated seeds: spread of the max validation reward.

    python3 scripts/stability_study.py --out runs/stability --seeds 0,1,2
"""

import argparse
import logging

from xilrl.experiments import dominance, entropy_decreased, seed_study
from xilrl.master import TrainingPlan


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/stability")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--cycles", type=int, default=150)
    p.add_argument("--experiences", type=int, default=9200)
    p.add_argument("--algos", default="PPO,DDPG")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    seeds = [int(s) for s in args.seeds.split(",")]
    stds = {}
    for algo in args.algos.split(","):
        plan = TrainingPlan(algorithm=algo, total_cycles=args.cycles, experiences_per_cycle=args.experiences)
        study = seed_study(plan, seeds, args.out)
        stds[algo] = study.std
        for seed, run in study.runs.items():
            d = dominance(run, plan)
            best = run.ledger.best()
            print(
                f"{algo} seed {seed}: max validation {best.validation_reward:.3f} at cycle {best.cycle}, "
                f"NOx {d.best_nox:.1f} (ref {d.baseline.nox:.1f}), soot {d.best_soot:.2f} (ref {d.baseline.soot:.2f}), "
                f"late failures {d.late_failures}, entropy decreased {entropy_decreased(run.ledger)}",
                flush=True,
            )
        print(f"{algo}: std of max validation reward {study.std:.4f}", flush=True)
    if len(stds) == 2:
        print(f"PPO more stable than DDPG: {stds.get('PPO', 0) < stds.get('DDPG', 0)}")


if __name__ == "__main__":
    main()
