"""Robust accuracy, per-term gradient norms and the adversarial weight-loss landscape."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd_attack
from .data import Dataset
from .models import ModelParams, check_same_arch, forward, param_linear_comb, predict
from .objectives import ConsistencyKind, mt_consistency, teacher_probs
from .seeding import stream

EVAL_BATCH = 256


@dataclass
class MetricsRecord:
    epoch: int
    natural_acc_train: float
    natural_acc_test: float
    robust_acc_train: float
    robust_acc_test: float
    robust_gap: float
    lambda_t: float
    lr: float
    grad_norm_ce: float
    grad_norm_cons: float
    train_loss: float = float("nan")

    def __post_init__(self):
        for name in ("natural_acc_train", "natural_acc_test", "robust_acc_train", "robust_acc_test"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LandscapeSeries:
    alpha_grid: list[float]
    losses: list[float]
    direction_seed: int = 0

    def __post_init__(self):
        if len(self.alpha_grid) != len(self.losses):
            raise ValueError("alpha grid and losses differ in length")
        if 0.0 not in self.alpha_grid:
            raise ValueError("alpha grid must contain 0")

    @property
    def spread(self) -> float:
        return max(self.losses) - min(self.losses)

    def at(self, alpha: float) -> float:
        return self.losses[self.alpha_grid.index(alpha)]

    def to_csv(self) -> str:
        rows = [f"{format(a, '.17g')},{format(l, '.17g')}" for a, l in zip(self.alpha_grid, self.losses)]
        return "alpha,loss\n" + "\n".join(rows) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def default_alpha_grid() -> list[float]:
    return [i / 10 for i in range(-10, 11)]


def worker_count() -> int:
    """Evaluator parallelism, capped by ``AT_LAB_THREADS`` (default 1)."""
    try:
        n = int(os.environ.get("AT_LAB_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def _map(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _batches(n: int, size: int):
    return [(start, min(start + size, n)) for start in range(0, n, size)]


def correct_mask(logits: np.ndarray, y) -> np.ndarray:
    """True where the label's logit strictly beats every other logit (ties are wrong)."""
    y = np.asarray(y)
    rows = np.arange(len(y))
    own = logits[rows, y]
    others = logits.copy()
    others[rows, y] = -np.inf
    return own > others.max(axis=1)


def natural_accuracy(params: ModelParams, dataset: Dataset) -> float:
    return float(correct_mask(predict(params, dataset.x), dataset.y).mean())


def robust_accuracy(params: ModelParams, dataset: Dataset, attack_cfg: AttackConfig, loss: str = "ce",
                    seed: int = 0, stream_key: tuple[int, ...] = (), batch_size: int = EVAL_BATCH) -> float:
    """Fraction of samples still classified correctly after the attack.

    Batch ``b`` draws its random start from ``stream(seed, "eval", *stream_key, b)``,
    so the result does not depend on the number of workers.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    params = params.detached()

    def one(item):
        b, (lo, hi) = item
        x, y = dataset.x[lo:hi], dataset.y[lo:hi]
        rng = stream(seed, "eval", *stream_key, b)
        x_adv = pgd_attack(params, x, y, attack_cfg, rng, loss=loss)
        return int(correct_mask(predict(params, x_adv), y).sum())

    counts = _map(one, enumerate(_batches(len(dataset), batch_size)))
    return sum(counts) / len(dataset)


def adversarial_loss(params: ModelParams, dataset: Dataset, attack_cfg: AttackConfig, seed: int = 0,
                     batch_size: int = EVAL_BATCH) -> float:
    """Mean cross-entropy on PGD examples crafted against ``params``."""
    params = params.detached()
    total = 0.0
    for b, (lo, hi) in enumerate(_batches(len(dataset), batch_size)):
        x, y = dataset.x[lo:hi], dataset.y[lo:hi]
        x_adv = pgd_attack(params, x, y, attack_cfg, stream(seed, "attack", b))
        total += T.softmax_cross_entropy(forward(params, x_adv), y).item() * (hi - lo)
    return total / len(dataset)


def _grad_norm(loss: T.Tensor, params: ModelParams) -> float:
    loss.backward()
    return float(np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in params.tensors)))


def grad_norms(student: ModelParams, teacher: ModelParams, x, x_adv, y,
               kind: ConsistencyKind = ConsistencyKind.MSE) -> tuple[float, float]:
    """Parameter-gradient norms of the CE term and of the raw (unweighted) consistency term."""
    check_same_arch(student, teacher)
    s = student.trainable()
    norm_ce = _grad_norm(T.softmax_cross_entropy(forward(s, x_adv), y), s)
    s = student.trainable()
    norm_cons = _grad_norm(mt_consistency(forward(s, x_adv), teacher_probs(teacher, x), kind), s)
    return norm_ce, norm_cons


def filter_normalize(d: ModelParams, theta: ModelParams, rng: np.random.Generator | None = None) -> ModelParams:
    """Rescale each output neuron's incoming weights in ``d`` to the norm of the same neuron in ``theta``.

    Weights are stored ``[d_in, d_out]`` so a neuron's filter is a column.
    Bias directions are zeroed. A zero-norm filter in ``d`` is redrawn from
    N(0, 1) using ``rng``.
    """
    check_same_arch(d, theta)
    arrays = []
    for (dw, _), (tw, tb) in zip(d.layers, theta.layers):
        w = dw.data.copy()
        dnorm = np.linalg.norm(w, axis=0)
        for j in np.flatnonzero(dnorm == 0):
            if rng is None:
                raise ValueError("zero-norm direction filter and no rng to redraw it")
            while dnorm[j] == 0:
                w[:, j] = rng.standard_normal(w.shape[0])
                dnorm[j] = np.linalg.norm(w[:, j])
        w *= np.linalg.norm(tw.data, axis=0) / dnorm
        arrays += [w, np.zeros_like(tb.data)]
    return ModelParams.from_arrays(arrays, theta.arch, theta.seed)


def random_direction(theta: ModelParams, seed: int) -> ModelParams:
    rng = stream(seed, "direction")
    raw = ModelParams.from_arrays([rng.standard_normal(t.shape) for t in theta.tensors], theta.arch, theta.seed)
    return filter_normalize(raw, theta, rng)


def landscape_probe(params: ModelParams, dataset: Dataset, alpha_grid=None, attack_cfg: AttackConfig | None = None,
                    seed: int = 0, direction: ModelParams | None = None) -> LandscapeSeries:
    """Adversarial loss of ``params + alpha * d`` along one filter-normalised Gaussian direction.

    PGD examples are regenerated for every perturbed model; each grid point
    reuses the same attack streams so differences come from the weights alone.
    """
    alpha_grid = default_alpha_grid() if alpha_grid is None else [float(a) for a in alpha_grid]
    attack_cfg = attack_cfg or AttackConfig()
    if 0.0 not in alpha_grid:
        raise ValueError("alpha grid must contain 0")
    d = random_direction(params, seed) if direction is None else direction

    def one(alpha):
        probe = params if alpha == 0.0 else param_linear_comb(params, d, 1.0, alpha)
        return adversarial_loss(probe, dataset, attack_cfg, seed)

    return LandscapeSeries(list(alpha_grid), _map(one, alpha_grid), seed)
