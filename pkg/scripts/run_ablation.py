"""Desk-scale loss ablation: every cell of the ablation preset over several seeds.

    python scripts/run_ablation.py --seeds 5 --out runs/ablation
"""

import argparse
import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from trgkd.config import RunConfig
from trgkd.experiment import ABLATION_PRESET, DESK_OVERRIDES, DESK_SEEDS, cached_teacher, prepare_data, run_distill
from trgkd.train import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--first-seed", type=int, default=DESK_SEEDS[0])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--cells", default=",".join(ABLATION_PRESET))
    ap.add_argument("--library-defaults", action="store_true", help="skip the desk overrides")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    base = RunConfig(epochs=args.epochs)
    if not args.library_defaults:
        base = replace(base, **DESK_OVERRIDES)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = prepare_data(base)
    teacher = cached_teacher(base, train, out / "teachers")
    print(f"teacher: train {evaluate(teacher, train):.4f} test {evaluate(teacher, test):.4f}")

    rows = []
    for cell in args.cells.split(","):
        accs = []
        for seed in range(args.first_seed, args.first_seed + args.seeds):
            res = run_distill(replace(base, seed=seed, **ABLATION_PRESET[cell]), teacher, train, test, cell)
            rows.append(res.row())
            accs.append(res.final_accuracy)
        print(f"{cell:10s} mean {np.mean(accs):.4f} std {np.std(accs, ddof=1) if len(accs) > 1 else 0:.4f}  "
              + " ".join(f"{a:.3f}" for a in accs), flush=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
