"""Adversarial weight-loss landscapes for the checkpoints written by reproduce_overfitting.py.

For every run directory it probes last.json and best.json along a few
filter-normalised directions on the training set and writes
``landscape_{last,best}_d{seed}.csv`` next to the checkpoint.

    python scripts/landscape_compare.py runs/overfit/*_s0
"""
import argparse
import statistics
from pathlib import Path

from atlab.attacks import AttackConfig
from atlab.data import blob_splits
from atlab.diagnostics import landscape_probe
from atlab.models import load_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("runs", nargs="+", help="run directories named <method>_s<seed>")
    ap.add_argument("--directions", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--spread", type=float, default=0.5)
    args = ap.parse_args()

    attack = AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=10)
    for run in map(Path, args.runs):
        seed = int(run.name.rsplit("_s", 1)[1])
        train_set, _ = blob_splits(200, 200, 20, 5, args.spread, seed)
        for which in ("last", "best"):
            params = load_checkpoint(run / f"{which}.json")
            spreads = []
            for d in args.directions:
                series = landscape_probe(params, train_set, attack_cfg=attack, seed=d)
                series.write_csv(run / f"landscape_{which}_d{d}.csv")
                spreads.append(series.spread)
            print(f"{run.name:16s} {which:4s} median max-min {statistics.median(spreads):.4f}  "
                  f"per direction {[round(s, 4) for s in spreads]}", flush=True)


if __name__ == "__main__":
    main()
