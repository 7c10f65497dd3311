"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The desk-scale runs (3 seeds x 2 methods, 60 epochs each) take several
minutes; they are shared by the reproduction and landscape checks.
"""
import math
import statistics
import time

import numpy as np
import pytest

from atlab import tensor as T
from atlab.attacks import AttackConfig, cw_inf_attack, pgd_attack, pgd_mt_attack
from atlab.cli import main as cli_main
from atlab.data import blob_splits
from atlab.diagnostics import landscape_probe
from atlab.models import ModelParams, forward, mlp_init
from atlab.objectives import (
    ConsistencyKind,
    RampupConfig,
    consistency_kl,
    consistency_mse,
    mt_loss,
    trades_loss,
)
from atlab.seeding import stream
from atlab.trainer import TrainConfig, _batch_loss, ema_update, sgd_step, train

from conftest import ACCEPTANCE

# desk regime (see README): 1,000 training points, blobs d=20, C=5
DESK_SPREAD = 0.5
DESK_BATCH = 32
DESK_LR = 0.1
DESK_SEEDS = (0, 1, 2)
DIRECTION_SEEDS = (0, 1, 2)


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line, flush=True)
    assert ok, line


# -- 1. gradient oracle ------------------------------------------------------------
def _positive(rng, shape):
    return rng.uniform(0.2, 2.0, size=shape)


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 2.0, size=shape)


def _primitive_cases(rng):
    """(name, f, point) triples: scalar-valued functions of one tensor."""
    a = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    idx = rng.integers(0, 4, size=3)
    labels = rng.integers(0, 4, size=3)
    weights = T.Tensor(rng.normal(size=(3, 4)))
    return [
        ("add", lambda t: T.sum(T.mul(T.add(t, T.Tensor(a)), weights)), rng.normal(size=(3, 4))),
        ("sub", lambda t: T.sum(T.mul(T.sub(T.Tensor(a), t), weights)), rng.normal(size=(3, 4))),
        ("mul", lambda t: T.sum(T.mul(t, T.Tensor(a))), rng.normal(size=(3, 4))),
        ("scale", lambda t: T.sum(T.mul(T.scale(t, 1.7), weights)), rng.normal(size=(3, 4))),
        ("neg", lambda t: T.sum(T.mul(-t, weights)), rng.normal(size=(3, 4))),
        ("square", lambda t: T.sum(T.mul(T.square(t), weights)), rng.normal(size=(3, 4))),
        ("relu", lambda t: T.sum(T.mul(T.relu(t), weights)), _away_from_zero(rng, (3, 4))),
        ("exp", lambda t: T.sum(T.mul(T.exp(t), weights)), rng.normal(size=(3, 4))),
        ("log", lambda t: T.sum(T.mul(T.log(t), weights)), _positive(rng, (3, 4))),
        ("clamp_min", lambda t: T.sum(T.mul(T.clamp_min(t, 0.0), weights)), _away_from_zero(rng, (3, 4))),
        ("sum_axis", lambda t: T.sum(T.mul(T.sum(t, axis=1), T.Tensor(b))), rng.normal(size=(3, 4))),
        ("mean", lambda t: T.mean(T.square(t)), rng.normal(size=(3, 4))),
        ("logsumexp", lambda t: T.sum(T.mul(T.logsumexp(t), T.Tensor(b))), rng.normal(size=(3, 4))),
        ("max_last", lambda t: T.sum(T.mul(T.max_last(t), T.Tensor(b))), rng.normal(size=(3, 4))),
        ("take_last", lambda t: T.sum(T.mul(T.take_last(t, idx), T.Tensor(b))), rng.normal(size=(3, 4))),
        ("matmul", lambda t: T.sum(T.mul(T.matmul(t, T.Tensor(w)), T.Tensor(a[:, :3]))), rng.normal(size=(3, 4))),
        ("matmul_rhs", lambda t: T.sum(T.mul(T.matmul(T.Tensor(a), t), T.Tensor(a[:, :3]))), rng.normal(size=(4, 3))),
        ("affine", lambda t: T.sum(T.mul(T.affine(t, T.Tensor(w), T.Tensor(b)), T.Tensor(a[:, :3]))), rng.normal(size=(3, 4))),
        ("log_softmax", lambda t: T.sum(T.mul(T.log_softmax(t), weights)), rng.normal(size=(3, 4))),
        ("softmax", lambda t: T.sum(T.mul(T.softmax(t), weights)), rng.normal(size=(3, 4))),
        ("cross_entropy", lambda t: T.softmax_cross_entropy(t, labels), rng.normal(size=(3, 4))),
    ]


def _param_fd_error(loss_fn, params: ModelParams, h=1e-6) -> float:
    live = params.trainable()
    loss_fn(live).backward()
    analytic = np.concatenate([t.grad.reshape(-1) for t in live.tensors])
    flat = params.flat()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        numeric[i] = (loss_fn(ModelParams.from_flat(flat + e, params.arch)).item()
                      - loss_fn(ModelParams.from_flat(flat - e, params.arch)).item()) / (2 * h)
    return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))).max())


def _objective_cases(rng):
    arch = [3, 4, 3]
    s = mlp_init(arch, int(rng.integers(1 << 30)))
    t = mlp_init(arch, int(rng.integers(1 << 30)))
    x = rng.uniform(size=(4, 3))
    x_adv = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0, 1)
    y = rng.integers(0, 3, size=4)
    beta, lam = rng.uniform(0, 8), rng.uniform(0, 40)
    target = T.softmax(forward(t, x)).detach()
    return s, [
        ("CE", lambda p: T.softmax_cross_entropy(forward(p, x_adv), y)),
        ("TRADES", lambda p: trades_loss(p, x, x_adv, y, beta)),
        ("MSE consistency", lambda p: consistency_mse(T.softmax(forward(p, x_adv)), target)),
        ("KL consistency", lambda p: consistency_kl(T.softmax(forward(p, x_adv)), target)),
        ("MT loss (MSE)", lambda p: mt_loss(p, t, x, x_adv, y, lam, ConsistencyKind.MSE)),
        ("MT loss (KL)", lambda p: mt_loss(p, t, x, x_adv, y, lam, ConsistencyKind.KL)),
    ]


def test_gradient_oracle():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for i in range(100):
        rng = np.random.default_rng([7, i])
        for name, f, point in _primitive_cases(rng):
            worst[name] = max(worst.get(name, 0.0), T.grad_check(f, point))
            counts[name] = counts.get(name, 0) + 1
        params, objectives = _objective_cases(rng)
        for name, f in objectives:
            worst[name] = max(worst.get(name, 0.0), _param_fd_error(f, params))
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and min(counts.values()) >= 100 and elapsed < 60
    verdict("gradient oracle", ok,
            f"{len(worst)} ops/objectives x {min(counts.values())} instances, worst rel err {err:.2e} ({name}), "
            f"{elapsed:.1f}s")


# -- 2. attack invariants -------------------------------------------------------------
def test_attack_invariants():
    start = time.perf_counter()
    executions, violations, worst = 0, 0, 0.0
    zero_ok = True
    for m in range(100):
        rng = np.random.default_rng([11, m])
        arch = [int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 4))]
        student, teacher = mlp_init(arch, m), mlp_init(arch, m + 1000)
        before = student.flat().tobytes() + teacher.flat().tobytes()
        for k in range(100):
            n = int(rng.integers(1, 5))
            # include points on the box faces
            x = np.clip(rng.uniform(-0.2, 1.2, size=(n, arch[0])), 0.0, 1.0)
            y = rng.integers(0, arch[-1], size=n)
            eps = float(rng.choice([0.0, rng.uniform(0, 0.5)]))
            steps = int(rng.integers(0, 5))
            cfg = AttackConfig(epsilon=eps, step_size=float(rng.uniform(1e-3, 0.3)), steps=steps,
                               random_init=bool(rng.integers(2)))
            kind = k % 5
            if kind == 0:
                x_adv = pgd_attack(student, x, y, cfg, rng)
            elif kind == 1:
                x_adv = pgd_attack(student, x, y, cfg, rng, loss="trades_kl")
            elif kind == 2:
                x_adv = cw_inf_attack(student, x, y, cfg, rng)
            else:
                x_adv = pgd_mt_attack(student, teacher, x, y, cfg, float(rng.uniform(0, 50)), rng,
                                      kind=ConsistencyKind.MSE if kind == 3 else ConsistencyKind.KL)
            executions += 1
            dist = float(np.abs(x_adv - x).max())
            worst = max(worst, dist - eps)
            if dist > eps + 1e-12 or x_adv.min() < -1e-12 or x_adv.max() > 1 + 1e-12:
                violations += 1
            if eps == 0.0 and kind in (0, 1) and not np.array_equal(x_adv, x):
                zero_ok = False
        if student.flat().tobytes() + teacher.flat().tobytes() != before:
            violations += 1
    elapsed = time.perf_counter() - start
    verdict("attack invariants", executions >= 10_000 and violations == 0 and zero_ok,
            f"{executions} executions, {violations} violations, max excess over eps {max(worst, 0.0):.1e}, "
            f"eps=0 identity {'holds' if zero_ok else 'broken'}, {elapsed:.1f}s")


# -- 3. reductions ----------------------------------------------------------------------
def test_reductions():
    train_set, test_set = blob_splits(12, 12, 5, 3, 0.2, seed=9)
    common = dict(arch=[5, 16, 3], epochs=5, batch_size=8, lr_decay_epochs=[3], track_grad_norms=False,
                  attack=AttackConfig(epsilon=0.05, step_size=0.0125, steps=3))
    base = train(TrainConfig(method="pgd_at", rampup=RampupConfig(0.0, 2, 2), **common), train_set, test_set)
    mt = train(TrainConfig(method="pgd_at_mt", ema_decay=0.0, rampup=RampupConfig(0.0, 2, 2), **common),
               train_set, test_set)
    bitwise = (base.student.same_bytes(mt.student) and base.best.same_bytes(mt.best)
               and [r.to_dict() for r in base.history] == [r.to_dict() for r in mt.history])

    # TRADES with beta=0: per-step training loss against clean CE on the same weights
    cfg = TrainConfig(method="trades", beta=0.0, rampup=RampupConfig(0.0, 2, 2), **common)
    params, velocity, rng = mlp_init(cfg.arch, 0), None, stream(0, "attack")
    worst = 0.0
    for step in range(40):
        idx = np.arange(step * 8, step * 8 + 8) % len(train_set)
        x, y = train_set.x[idx], train_set.y[idx]
        x_adv = pgd_attack(params, x, y, cfg.attack, rng, loss="trades_kl")
        live = params.trainable()
        loss = _batch_loss(cfg, live, live, x, x_adv, y, 0.0)
        clean = T.softmax_cross_entropy(forward(params, x), y).item()
        worst = max(worst, abs(loss.item() - clean))
        loss.backward()
        params, velocity = sgd_step(params, [t.grad for t in live.tensors], cfg.lr, cfg.momentum,
                                    cfg.weight_decay, velocity)
    verdict("reductions", bitwise and worst <= 1e-12,
            f"pgd_at_mt(lambda_max=0, eta=0) == pgd_at bitwise: {bitwise}; "
            f"trades(beta=0) vs clean CE over 40 steps: max diff {worst:.1e}")


# -- 4. EMA -------------------------------------------------------------------------------
def test_ema_correctness():
    worst = 0.0
    for eta in (0.0, 0.5, 0.9, 0.99, 0.999):
        theta0, theta_s = mlp_init([4, 6, 3], 1), mlp_init([4, 6, 3], 2)
        cur = theta0
        for k in range(1, 101):
            cur = ema_update(cur, theta_s, eta)
            closed = eta ** k * theta0.flat() + (1 - eta ** k) * theta_s.flat()
            worst = max(worst, float(np.abs(cur.flat() - closed).max()))

    train_set, test_set = blob_splits(12, 12, 5, 3, 0.2, seed=4)
    cfg = TrainConfig(method="pgd_at_mt", arch=[5, 16, 3], epochs=6, batch_size=8, lr_decay_epochs=[4],
                      rampup=RampupConfig(30.0, 4, 2), track_grad_norms=False,
                      attack=AttackConfig(epsilon=0.05, step_size=0.0125, steps=3))
    equal = []
    train(cfg, train_set, test_set, callback=lambda r, s, t: equal.append(s.same_bytes(t)))
    pre_ok = all(equal[:4]) and not any(equal[4:])
    verdict("EMA correctness", worst <= 1e-12 and pre_ok,
            f"closed form k<=100 max err {worst:.1e}; teacher==student for epochs < E_s: {equal[:4]}, "
            f"after: {equal[4:]}")


# -- 5. consistency identities ---------------------------------------------------------------
def test_consistency_identities():
    rng = np.random.default_rng(5)
    same = rng.dirichlet(np.ones(5), size=200)
    zero = all(consistency_mse(T.Tensor(p[None]), T.Tensor(p[None])).item() == 0.0
               and consistency_kl(T.Tensor(p[None]), T.Tensor(p[None])).item() == 0.0 for p in same)
    p, q = rng.dirichlet(np.ones(5), size=1000), rng.dirichlet(np.ones(5), size=1000)
    kl_min = min(consistency_kl(T.Tensor(p[i:i + 1]), T.Tensor(q[i:i + 1])).item() for i in range(1000))
    ln2 = consistency_kl(T.Tensor([[1.0, 0.0]]), T.Tensor([[0.5, 0.5]])).item()
    verdict("consistency identities", zero and kl_min >= 0 and abs(ln2 - math.log(2)) <= 1e-9,
            f"L(p,p)=0 both kinds: {zero}; min KL over 1000 pairs {kl_min:.3e}; "
            f"KL([1,0]||[.5,.5]) - ln2 = {ln2 - math.log(2):.1e}")


# -- 6. desk-scale robust overfitting -----------------------------------------------------------
def desk_config(method: str, seed: int) -> TrainConfig:
    return TrainConfig(method=method, arch=[20, 256, 256, 5], epochs=60, batch_size=DESK_BATCH, lr=DESK_LR,
                       lr_decay_epochs=[30, 45], attack=AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=10),
                       rampup=RampupConfig(lambda_max=30.0, start_epoch=30, ramp_len=20), ema_decay=0.999,
                       seed=seed, track_grad_norms=False)


@pytest.fixture(scope="session")
def desk_runs():
    start = time.perf_counter()
    runs = {}
    for seed in DESK_SEEDS:
        data = blob_splits(200, 200, 20, 5, DESK_SPREAD, seed)
        for method in ("pgd_at", "pgd_at_mt"):
            runs[method, seed] = (train(desk_config(method, seed), *data), data)
    return runs, time.perf_counter() - start


def test_desk_robust_overfitting(desk_runs):
    runs, elapsed = desk_runs
    gap = {m: [runs[m, s][0].history[-1].robust_gap for s in DESK_SEEDS] for m in ("pgd_at", "pgd_at_mt")}
    rob = {m: [runs[m, s][0].history[-1].robust_acc_test for s in DESK_SEEDS] for m in ("pgd_at", "pgd_at_mt")}
    g_at, g_mt = statistics.median(gap["pgd_at"]), statistics.median(gap["pgd_at_mt"])
    r_at, r_mt = statistics.median(rob["pgd_at"]), statistics.median(rob["pgd_at_mt"])
    ratio = g_mt / g_at if g_at > 0 else math.inf
    verdict("desk robust overfitting", ratio <= 0.70 and r_mt >= r_at,
            f"median last gap MT {g_mt:.3f} vs AT {g_at:.3f} (ratio {ratio:.2f}, need <= 0.70); "
            f"median test robust MT {r_mt:.3f} vs AT {r_at:.3f} (need >=); "
            f"per-seed gaps AT {[round(v, 3) for v in gap['pgd_at']]} MT {[round(v, 3) for v in gap['pgd_at_mt']]}; "
            f"per-seed test robust AT {[round(v, 3) for v in rob['pgd_at']]} MT {[round(v, 3) for v in rob['pgd_at_mt']]}; "
            f"{elapsed / 60:.1f} min")


# -- 7. landscape flatness --------------------------------------------------------------------------
def _adv_loss_oracle(params, dataset, attack, seed, batch=256):
    """Mean CE on PGD examples, recomputed here with a numpy log-softmax instead of the library loss."""
    total = 0.0
    for b, lo in enumerate(range(0, len(dataset), batch)):
        x, y = dataset.x[lo:lo + batch], dataset.y[lo:lo + batch]
        z = forward(params, pgd_attack(params, x, y, attack, stream(seed, "attack", b))).data
        z = z - z.max(axis=1, keepdims=True)
        total += float(np.sum(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]))
    return total / len(dataset)


def test_landscape_flatness(desk_runs):
    runs, _ = desk_runs
    attack = AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=10)
    spreads = {"pgd_at": [], "pgd_at_mt": []}
    zero_err = 0.0
    for seed in DESK_SEEDS:
        for method in spreads:
            result, (train_set, _) = runs[method, seed]
            per_dir = []
            for d in DIRECTION_SEEDS:
                series = landscape_probe(result.model, train_set, attack_cfg=attack, seed=d)
                zero_err = max(zero_err, abs(series.at(0.0) - _adv_loss_oracle(result.model, train_set, attack, d)))
                per_dir.append(series.spread)
            spreads[method].append(statistics.median(per_dir))
    flatter = [mt <= at for at, mt in zip(spreads["pgd_at"], spreads["pgd_at_mt"])]
    verdict("landscape flatness", all(flatter) and zero_err <= 1e-9,
            f"median-over-directions spread per seed AT {[round(v, 3) for v in spreads['pgd_at']]} "
            f"MT {[round(v, 3) for v in spreads['pgd_at_mt']]}; MT flatter on {sum(flatter)}/{len(flatter)} seeds; "
            f"alpha=0 vs adversarial loss max diff {zero_err:.1e}")


# -- 8. CLI determinism ---------------------------------------------------------------------------------
def test_cli_determinism(tmp_path, monkeypatch):
    config = tmp_path / "run.json"
    config.write_text('{"method": "pgd_at_mt", "arch": [6, 24, 3], "epochs": 4, "batch_size": 10, '
                      '"lr_decay_epochs": [2, 3], "rampup": {"start_epoch": 2, "ramp_len": 2}, '
                      '"dataset": {"n_train_per_class": 15, "n_test_per_class": 15, "d": 6, "classes": 3, '
                      '"spread": 0.3}}')
    names = ["config.json", "metrics.csv", "metrics.json", "last.json", "best.json", "student.json",
             "eval.json", "landscape.csv"]
    outputs = []
    for run, threads in enumerate(("1", "1", "4")):
        monkeypatch.setenv("AT_LAB_THREADS", threads)
        out = tmp_path / f"run{run}"
        codes = [
            cli_main(["train", "--config", str(config), "--output-dir", str(out)]),
            cli_main(["eval", "--checkpoint", str(out / "last.json"), "--dataset", str(config),
                      "--out", str(out / "eval.json")]),
            cli_main(["landscape", "--checkpoint", str(out / "last.json"), "--dataset", str(config),
                      "--split", "train", "--out", str(out / "landscape.csv")]),
        ]
        assert codes == [0, 0, 0]
        outputs.append({n: (out / n).read_bytes() for n in names})
    repeat = [n for n in names if outputs[0][n] != outputs[1][n]]
    threads = [n for n in names if outputs[0][n] != outputs[2][n]]
    verdict("CLI determinism", not repeat and not threads,
            f"{len(names)} artifacts (train/eval/landscape); differing on repeat: {repeat or 'none'}; "
            f"differing with AT_LAB_THREADS=4: {threads or 'none'}")
