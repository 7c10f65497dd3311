"""Desk-scale robust-overfitting run: PGD-AT vs PGD-AT+MT over several seeds.

Writes one metrics CSV per (method, seed) plus last/best checkpoints and
prints the last-epoch gap / test robustness table and the medians.

    python scripts/reproduce_overfitting.py --out runs/overfit --seeds 0 1 2
"""
import argparse
import statistics
import time
from pathlib import Path

from atlab.attacks import AttackConfig
from atlab.data import blob_splits, write_metrics_csv
from atlab.models import save_checkpoint
from atlab.objectives import RampupConfig
from atlab.trainer import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=["pgd_at", "pgd_at_mt"])
    ap.add_argument("--spread", type=float, default=0.5)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--grad-norms", action="store_true", help="also log per-term gradient norms (slower)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    decay = [args.epochs // 2, args.epochs * 3 // 4]
    last = {m: [] for m in args.methods}
    for seed in args.seeds:
        train_set, test_set = blob_splits(200, 200, 20, 5, args.spread, seed)
        for method in args.methods:
            cfg = TrainConfig(method=method, arch=[20, 256, 256, 5], epochs=args.epochs, batch_size=args.batch_size,
                              lr=args.lr, lr_decay_epochs=decay,
                              attack=AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=10),
                              rampup=RampupConfig(lambda_max=30.0, start_epoch=decay[0], ramp_len=20),
                              seed=seed, track_grad_norms=args.grad_norms)
            t0 = time.time()
            res = train(cfg, train_set, test_set)
            run = out / f"{method}_s{seed}"
            run.mkdir(exist_ok=True)
            write_metrics_csv(res.history, run / "metrics.csv")
            save_checkpoint(res.model, run / "last.json")
            save_checkpoint(res.best, run / "best.json")
            h = res.history[-1]
            last[method].append((h.robust_gap, h.robust_acc_test))
            print(f"{method:10s} seed {seed}  gap {h.robust_gap:.3f}  rob_test {h.robust_acc_test:.3f}  "
                  f"best {res.history[res.best_epoch].robust_acc_test:.3f}@{res.best_epoch}  "
                  f"nat {h.natural_acc_test:.3f}  ({time.time() - t0:.0f}s)", flush=True)

    print("\nmedian over seeds (last epoch)")
    for method, rows in last.items():
        print(f"  {method:10s} gap {statistics.median(r[0] for r in rows):.3f}  "
              f"rob_test {statistics.median(r[1] for r in rows):.3f}")


if __name__ == "__main__":
    main()
