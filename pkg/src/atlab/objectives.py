"""Outer-minimisation losses: PGD-AT, TRADES, consistency terms and the mean-teacher objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .models import ModelParams, check_same_arch, forward
from .tensor import Tensor

KL_FLOOR = 1e-12


class ConsistencyKind(str, Enum):
    MSE = "mse"
    KL = "kl"


@dataclass
class RampupConfig:
    lambda_max: float = 30.0
    start_epoch: int = 30
    ramp_len: int = 20

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError(f"lambda_max must be >= 0, got {self.lambda_max}")
        if self.ramp_len < 1:
            raise ValueError(f"ramp_len must be >= 1, got {self.ramp_len}")
        if self.start_epoch < 0:
            raise ValueError(f"start_epoch must be >= 0, got {self.start_epoch}")


def rampup_weight(epoch: int, cfg: RampupConfig) -> float:
    """Consistency weight for an epoch: zero before the start epoch, then a Gaussian ramp.

    ``lambda_max * exp(-5 (1 - p)^2)`` with ``p = min(1, (epoch - start + 1) / ramp_len)``.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch < cfg.start_epoch:
        return 0.0
    p = min(1.0, (epoch - cfg.start_epoch + 1) / cfg.ramp_len)
    return cfg.lambda_max * math.exp(-5.0 * (1.0 - p) ** 2)


def _check_probs(p_s: Tensor, p_t: Tensor) -> None:
    if p_s.shape != p_t.shape or p_s.ndim != 2:
        raise T.ShapeError(f"consistency: shapes {p_s.shape} and {p_t.shape} differ or are not [m, C]")
    for name, p in (("student", p_s), ("teacher", p_t)):
        if not np.allclose(p.data.sum(axis=1), 1.0, rtol=0.0, atol=1e-6):
            raise ValueError(f"{name} rows are not probability distributions")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of KL(p || q); both sides clamped below at 1e-12 before the log."""
    logp = T.log(T.clamp_min(p, KL_FLOOR))
    logq = T.log(T.clamp_min(q, KL_FLOOR))
    return T.mean(T.sum(p * (logp - logq), axis=1))


def consistency_mse(p_s: Tensor, p_t: Tensor) -> Tensor:
    _check_probs(p_s, p_t)
    return T.mean(T.sum(T.square(p_s - p_t.detach()), axis=1))


def consistency_kl(p_s: Tensor, p_t: Tensor) -> Tensor:
    """KL(p_s || p_t) averaged over rows, teacher side detached."""
    _check_probs(p_s, p_t)
    return kl_divergence(p_s, p_t.detach())


def mt_consistency(student_logits: Tensor, teacher_probs, kind: ConsistencyKind) -> Tensor:
    """Consistency between student on x' and the (constant) teacher on clean x.

    KL is taken teacher-first, KL(p_t || p_s); MSE is symmetric.
    """
    kind = ConsistencyKind(kind)
    p_t = T.as_tensor(teacher_probs).detach()
    p_s = T.softmax(student_logits)
    if kind is ConsistencyKind.MSE:
        return T.mean(T.sum(T.square(p_s - p_t), axis=1))
    return kl_divergence(p_t, p_s)


def teacher_probs(teacher: ModelParams, x) -> np.ndarray:
    return T.softmax(forward(teacher.detached(), x)).data


def trades_from_logits(clean_logits: Tensor, adv_logits: Tensor, y, beta: float) -> Tensor:
    ce = T.softmax_cross_entropy(clean_logits, y)
    if beta == 0:
        return ce
    kl = kl_divergence(T.softmax(clean_logits), T.softmax(adv_logits))
    return ce + beta * kl


def trades_loss(params: ModelParams, x, x_adv, y, beta: float) -> Tensor:
    """CE on clean inputs plus ``beta * KL(f(x) || f(x_adv))``."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return trades_from_logits(forward(params, x), forward(params, x_adv), y, beta)


def mt_loss(student: ModelParams, teacher: ModelParams, x, x_adv, y, lambda_t: float,
            kind: ConsistencyKind = ConsistencyKind.MSE) -> Tensor:
    """CE of the student on x_adv plus ``lambda_t`` times its consistency with the teacher on x."""
    check_same_arch(student, teacher)
    if lambda_t < 0:
        raise ValueError(f"lambda_t must be >= 0, got {lambda_t}")
    adv_logits = forward(student, x_adv)
    ce = T.softmax_cross_entropy(adv_logits, y)
    if lambda_t == 0:
        return ce
    return ce + lambda_t * mt_consistency(adv_logits, teacher_probs(teacher, x), kind)


def trades_mt_loss(student: ModelParams, teacher: ModelParams, x, x_adv, y, beta: float,
                   lambda_t: float, kind: ConsistencyKind = ConsistencyKind.MSE) -> Tensor:
    check_same_arch(student, teacher)
    clean_logits = forward(student, x)
    adv_logits = forward(student, x_adv)
    loss = trades_from_logits(clean_logits, adv_logits, y, beta)
    if lambda_t == 0:
        return loss
    return loss + lambda_t * mt_consistency(adv_logits, teacher_probs(teacher, x), kind)
