"""Fine-tune a MiL checkpoint on the HiL tier and compare with training on HiL from scratch.

    python3 scripts/transfer_study.py --from runs/stability/ppo_seed0/checkpoints/cycle_0150.pol --out runs/transfer
"""

import argparse
import logging

from xilrl.experiments import entropy_decreased, transfer_study
from xilrl.master import TrainingPlan, load_checkpoint
from xilrl.plant import TierConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--from", dest="source", required=True, help="MiL .pol checkpoint")
    p.add_argument("--out", default="runs/transfer")
    p.add_argument("--cycles", type=int, default=150, help="HiL cycles for the scratch arm")
    p.add_argument("--transfer-cycles", type=int, help="HiL cycles for the transfer arm (default: same)")
    p.add_argument("--experiences", type=int, default=9200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    source = load_checkpoint(args.source)
    plan = TrainingPlan(
        algorithm=source.algorithm,
        total_cycles=args.cycles,
        experiences_per_cycle=args.experiences,
        tier=TierConfig.hil(),
        validation_every=1,
        seed=args.seed,
    )
    study = transfer_study(source, plan, args.transfer_cycles, out_dir=args.out)
    print(f"source checkpoint: {source.algorithm} after {source.training_cycle} MiL cycles")
    print(f"pure-HiL max validation reward {study.target:.3f}")
    print(f"HiL cycles to come within 5 %: scratch {study.scratch_cycles}, transfer {study.transfer_cycles}")
    print(f"speedup {study.speedup:.2f}")
    for name, run in (("scratch", study.scratch), ("transfer", study.transfer)):
        if len(run.ledger) >= 4:
            print(f"{name}: entropy decreased over the run: {entropy_decreased(run.ledger)}")


if __name__ == "__main__":
    main()
