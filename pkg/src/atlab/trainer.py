"""Training loops for PGD-AT, TRADES and their mean-teacher variants."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, eval_attack, pgd_attack, pgd_mt_attack
from .data import Dataset
from .diagnostics import MetricsRecord, grad_norms, natural_accuracy, robust_accuracy
from .models import ModelParams, check_same_arch, forward, mlp_init, param_linear_comb
from .objectives import (
    ConsistencyKind,
    RampupConfig,
    mt_loss,
    rampup_weight,
    trades_loss,
    trades_mt_loss,
)
from .seeding import stream

log = logging.getLogger(__name__)

METHODS = ("pgd_at", "trades", "pgd_at_mt", "trades_mt")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    method: str = "pgd_at"
    arch: list[int] = field(default_factory=lambda: [20, 256, 256, 5])
    epochs: int = 60
    batch_size: int = 128
    lr: float = 0.1
    lr_decay_epochs: list[int] = field(default_factory=lambda: [30, 45])
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float = 6.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval_attack: AttackConfig | None = None
    consistency: ConsistencyKind = ConsistencyKind.MSE
    rampup: RampupConfig = field(default_factory=RampupConfig)
    ema_decay: float = 0.999
    seed: int = 0
    track_grad_norms: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        self.consistency = ConsistencyKind(self.consistency)
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.rampup.start_epoch > self.epochs:
            raise ValueError(f"start epoch {self.rampup.start_epoch} beyond {self.epochs} epochs")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError(f"lr decay epochs must be strictly increasing, got {self.lr_decay_epochs}")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("lr and lr_decay_factor must be positive")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.eval_attack is None:
            self.eval_attack = eval_attack("pgd10", self.attack.epsilon)[0]

    @property
    def is_mt(self) -> bool:
        return self.method.endswith("_mt")

    @property
    def base_loss(self) -> str:
        return "trades_kl" if self.method.startswith("trades") else "ce"


@dataclass
class TrainedModel:
    student: ModelParams
    teacher: ModelParams
    history: list[MetricsRecord]
    best_epoch: int
    best: ModelParams
    method: str = "pgd_at"

    @property
    def model(self) -> ModelParams:
        """The model that is reported: the teacher for mean-teacher runs."""
        return self.teacher if self.method.endswith("_mt") else self.student


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    passed = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr / cfg.lr_decay_factor ** passed


def ema_update(theta_t: ModelParams, theta_s: ModelParams, eta: float) -> ModelParams:
    check_same_arch(theta_t, theta_s)
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {eta}")
    return param_linear_comb(theta_t, theta_s, eta, 1.0 - eta)


class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: list[np.ndarray] | None = None

    def step(self, params: ModelParams, grads: list[np.ndarray | None]) -> ModelParams:
        new, self.velocity = sgd_step(params, grads, self.lr, self.momentum, self.weight_decay, self.velocity)
        return new


def sgd_step(params: ModelParams, grads, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity=None) -> tuple[ModelParams, list[np.ndarray]]:
    """One step ``v <- m v + (g + wd p); p <- p - lr v``; returns new params and velocity."""
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    tensors = params.tensors
    if len(grads) != len(tensors):
        raise ValueError(f"{len(grads)} gradients for {len(tensors)} parameters")
    velocity = velocity or [np.zeros_like(t.data) for t in tensors]
    arrays, new_v = [], []
    for i, (t, g, v) in enumerate(zip(tensors, grads, velocity)):
        if g is None:
            raise ValueError(f"missing gradient for parameter {i} (layer {i // 2}, {'W' if i % 2 == 0 else 'b'})")
        v = momentum * v + (g + weight_decay * t.data)
        arrays.append(t.data - lr * v)
        new_v.append(v)
    return ModelParams.from_arrays(arrays, params.arch, params.seed), new_v


def _batch_loss(cfg: TrainConfig, student: ModelParams, teacher: ModelParams, x, x_adv, y, lam: float):
    if cfg.method == "pgd_at":
        return T.softmax_cross_entropy(forward(student, x_adv), y)
    if cfg.method == "trades":
        return trades_loss(student, x, x_adv, y, cfg.beta)
    if cfg.method == "pgd_at_mt":
        return mt_loss(student, teacher, x, x_adv, y, lam, cfg.consistency)
    return trades_mt_loss(student, teacher, x, x_adv, y, cfg.beta, lam, cfg.consistency)


def evaluate(model: ModelParams, epoch: int, cfg: TrainConfig, train_set: Dataset, test_set: Dataset) -> dict:
    rob_train = robust_accuracy(model, train_set, cfg.eval_attack, seed=cfg.seed, stream_key=(epoch, 0))
    rob_test = robust_accuracy(model, test_set, cfg.eval_attack, seed=cfg.seed, stream_key=(epoch, 1))
    return dict(
        natural_acc_train=natural_accuracy(model, train_set),
        natural_acc_test=natural_accuracy(model, test_set),
        robust_acc_train=rob_train,
        robust_acc_test=rob_test,
        robust_gap=rob_train - rob_test,
    )


def train(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, callback=None) -> TrainedModel:
    """Run ``cfg.epochs`` epochs and return the final, reported and best models.

    Before ``cfg.rampup.start_epoch`` mean-teacher methods train exactly like
    their base method and keep the teacher equal to the student; from then on
    the attack and loss include the consistency term and the teacher follows
    the student by EMA after every step.

    ``callback(record, student, teacher)`` runs after every epoch.
    """
    if len(train_set) == 0 or len(test_set) == 0:
        raise ValueError("train and test sets must be non-empty")
    if train_set.x.shape[1] != cfg.arch[0]:
        raise ValueError(f"data has {train_set.x.shape[1]} features, arch expects {cfg.arch[0]}")

    student = mlp_init(cfg.arch, cfg.seed)
    teacher = student
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    shuffle_rng = stream(cfg.seed, "shuffle")
    attack_rng = stream(cfg.seed, "attack")
    history: list[MetricsRecord] = []
    best_epoch, best, best_rob = 0, student, -1.0
    n = len(train_set)

    for epoch in range(cfg.epochs):
        opt.lr = lr_at(epoch, cfg)
        mt_active = cfg.is_mt and epoch >= cfg.rampup.start_epoch
        lam = rampup_weight(epoch, cfg.rampup) if cfg.is_mt else 0.0
        order = shuffle_rng.permutation(n)
        losses, gn_ce, gn_cons = [], [], []

        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = train_set.x[idx], train_set.y[idx]
            if mt_active:
                x_adv = pgd_mt_attack(student, teacher, x, y, cfg.attack, lam, attack_rng,
                                      kind=cfg.consistency, loss=cfg.base_loss)
            else:
                x_adv = pgd_attack(student, x, y, cfg.attack, attack_rng, loss=cfg.base_loss)

            if cfg.track_grad_norms:
                ce_norm, cons_norm = grad_norms(student, teacher, x, x_adv, y, cfg.consistency)
                gn_ce.append(ce_norm)
                gn_cons.append(cons_norm)

            trainable = student.trainable()
            loss = _batch_loss(cfg, trainable, teacher, x, x_adv, y, lam)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            loss.backward()
            losses.append(value)
            student = opt.step(student, [t.grad for t in trainable.tensors])

            if cfg.is_mt:
                teacher = ema_update(teacher, student, cfg.ema_decay) if mt_active else student
            else:
                teacher = student

        model = teacher if cfg.is_mt else student
        record = MetricsRecord(
            epoch=epoch,
            lambda_t=lam,
            lr=opt.lr,
            grad_norm_ce=float(np.mean(gn_ce)) if gn_ce else 0.0,
            grad_norm_cons=float(np.mean(gn_cons)) if gn_cons else 0.0,
            train_loss=float(np.mean(losses)),
            **evaluate(model, epoch, cfg, train_set, test_set),
        )
        history.append(record)
        if record.robust_acc_test > best_rob:
            best_epoch, best, best_rob = epoch, model, record.robust_acc_test
        log.info("epoch %d loss %.4f nat %.3f rob %.3f/%.3f gap %.3f", epoch, record.train_loss,
                 record.natural_acc_test, record.robust_acc_train, record.robust_acc_test, record.robust_gap)
        if callback is not None:
            callback(record, student, teacher)

    return TrainedModel(student, teacher, history, best_epoch, best, cfg.method)
