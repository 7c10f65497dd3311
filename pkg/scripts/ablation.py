"""Mean-teacher ablations on the desk task: consistency kind, EMA decay, weight, warm-up.

Each row changes one knob from the default PGD-AT+MT setting and reports the
last-epoch robust gap and test robustness.

    python scripts/ablation.py --seed 0 --study kind
"""
import argparse
import dataclasses

from atlab.attacks import AttackConfig
from atlab.data import blob_splits
from atlab.objectives import ConsistencyKind, RampupConfig
from atlab.trainer import TrainConfig, train

STUDIES = {
    "kind": [("mse", {}), ("kl", {"consistency": ConsistencyKind.KL})],
    "eta": [(f"eta={e}", {"ema_decay": e}) for e in (0.0, 0.99, 0.999, 0.9999)],
    "lambda": [(f"lambda={lam}", {"rampup": RampupConfig(lam, 30, 20)}) for lam in (0.0, 10.0, 30.0, 100.0)],
    # "warm-up" read as the ramp-up length after E_s; ramp_len=1 is a step to lambda_max
    "warmup": [(f"ramp_len={r}", {"rampup": RampupConfig(30.0, 30, r)}) for r in (1, 10, 20)],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--study", choices=sorted(STUDIES), default="kind")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--spread", type=float, default=0.5)
    ap.add_argument("--batch-size", type=int, default=32)
    args = ap.parse_args()

    train_set, test_set = blob_splits(200, 200, 20, 5, args.spread, args.seed)
    base = TrainConfig(method="pgd_at_mt", arch=[20, 256, 256, 5], batch_size=args.batch_size,
                       attack=AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=10),
                       seed=args.seed, track_grad_norms=False)
    print(f"{'setting':14s} {'gap':>6s} {'rob_test':>8s} {'best':>6s} {'nat':>6s}")
    for label, change in STUDIES[args.study]:
        res = train(dataclasses.replace(base, **change), train_set, test_set)
        h = res.history[-1]
        print(f"{label:14s} {h.robust_gap:6.3f} {h.robust_acc_test:8.3f} "
              f"{res.history[res.best_epoch].robust_acc_test:6.3f} {h.natural_acc_test:6.3f}", flush=True)


if __name__ == "__main__":
    main()
