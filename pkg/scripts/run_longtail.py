"""Accuracy of full TRG and KD-only students as the training split grows more imbalanced.

    python scripts/run_longtail.py --rates 1,10,50 --seeds 5
"""

import argparse
import csv
from dataclasses import replace
from pathlib import Path

import numpy as np

from trgkd.config import RunConfig
from trgkd.experiment import ABLATION_PRESET, DESK_OVERRIDES, DESK_SEEDS, cached_teacher, prepare_data, run_distill


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", default="1,10,50")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--first-seed", type=int, default=DESK_SEEDS[0])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--out", default="runs/longtail")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = replace(RunConfig(epochs=args.epochs), **DESK_OVERRIDES)
    rows, means = [], {}
    for rho in (float(r) for r in args.rates.split(",")):
        cfg = replace(base, imbalance_rate=rho)
        train, test = prepare_data(cfg)
        teacher = cached_teacher(cfg, train, out / "teachers")
        print(f"rho={rho:g}: {len(train)} training images, class counts {train.class_counts.tolist()}")
        for cell in ("full", "kd"):
            accs = []
            for seed in range(args.first_seed, args.first_seed + args.seeds):
                res = run_distill(replace(cfg, seed=seed, **ABLATION_PRESET[cell]), teacher, train, test, cell)
                rows.append({"rho": rho, **res.row()})
                accs.append(res.final_accuracy)
            means[rho, cell] = float(np.mean(accs))
            print(f"  {cell:5s} mean {means[rho, cell]:.4f}", flush=True)
    rates = sorted({r for r, _ in means})
    for cell in ("full", "kd"):
        print(f"{cell}: drop {rates[0]:g}->{rates[-1]:g} = {means[rates[0], cell] - means[rates[-1], cell]:.4f}")
    with open(out / "longtail.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
