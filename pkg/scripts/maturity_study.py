"""Transfer checkpoints of increasing MiL maturity to HiL and compare the outcomes.

Trains on MiL once, keeping checkpoints A, B, C at the ``--save-at``
cycles, then fine-tunes each on HiL and prints a comparison table
against the reference controller.

    python3 scripts/maturity_study.py --save-at 20,60,150 --out runs/maturity
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from xilrl.experiments import spec_for, train
from xilrl.master import DirectExecutor, TrainingPlan, baseline_run, checkpoint_path, load_checkpoint, transfer_policy
from xilrl.plant import TierConfig
from xilrl.reports import make_comparison_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/maturity")
    p.add_argument("--save-at", default="20,60,150")
    p.add_argument("--hil-cycles", type=int, default=30)
    p.add_argument("--experiences", type=int, default=9200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)
    out = Path(args.out)
    save_at = tuple(int(x) for x in args.save_at.split(","))
    mil = TrainingPlan(total_cycles=max(save_at), experiences_per_cycle=args.experiences, save_at=save_at, seed=args.seed)
    train(mil, out / "mil")
    hil = replace(mil, tier=TierConfig.hil(), total_cycles=args.hil_cycles, save_at=())
    baseline, _ = baseline_run(hil)
    ledgers = {}
    for tag, cycle in zip("ABCDEFGH", save_at):
        source = load_checkpoint(checkpoint_path(out / "mil" / "checkpoints", cycle))
        sub = out / f"hil_{tag}"
        run = transfer_policy(source, replace(hil, checkpoint_dir=str(sub / "checkpoints")), DirectExecutor(spec_for(hil)), sub / "ledger.csv")
        ledgers[f"{tag} ({cycle} MiL cycles)"] = run.ledger
    ledgers["reference"] = baseline
    print(make_comparison_table(ledgers, baseline).to_text(), end="")


if __name__ == "__main__":
    main()
