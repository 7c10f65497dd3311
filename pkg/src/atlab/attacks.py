"""L-infinity inner maximisation: PGD, the mean-teacher PGD variant and C&W-inf."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .models import ModelParams, check_same_arch, forward
from .objectives import ConsistencyKind, kl_divergence, mt_consistency, teacher_probs
from .tensor import Tensor

LOSSES = ("ce", "cw", "trades_kl")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_init: bool = True
    clamp_lo: float = 0.0
    clamp_hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0 when steps > 0, got {self.step_size}")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError(f"empty input box [{self.clamp_lo}, {self.clamp_hi}]")


def eval_attack(name: str, epsilon: float = 8 / 255) -> tuple[AttackConfig, str]:
    """Named evaluation attack: ``pgd10``, ``pgd100``, ``cw100`` or ``none``.

    All use random init and step size epsilon / 4. A zero budget gives the
    identity attack whatever the name.
    """
    presets = {"pgd10": (10, "ce"), "pgd100": (100, "ce"), "cw100": (100, "cw"), "none": (0, "ce")}
    if name not in presets:
        raise ValueError(f"unknown attack {name!r}; choose from {sorted(presets)}")
    steps, loss = presets[name]
    if name == "none" or epsilon == 0:
        return AttackConfig(epsilon=0.0, step_size=1.0, steps=0, random_init=False), loss
    return AttackConfig(epsilon=epsilon, step_size=epsilon / 4, steps=steps, random_init=True), loss


def random_init(x, epsilon: float, rng: np.random.Generator, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    u = rng.uniform(-1.0, 1.0, size=x.shape)
    return np.clip(x + epsilon * u, lo, hi)


def project_linf(x_adv, x, epsilon: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise T.ShapeError(f"project_linf: x_adv {x_adv.shape} vs x {x.shape}")
    out = np.minimum(np.maximum(x_adv, x - epsilon), x + epsilon)
    return np.minimum(np.maximum(out, lo), hi)


def margin(logits: Tensor, y) -> Tensor:
    """Per-row ``max_{j != y} Z_j - Z_y``."""
    y = np.asarray(y)
    mask = np.zeros(logits.shape)
    mask[np.arange(logits.shape[0]), y] = -np.inf
    return T.max_last(logits + mask) - T.take_last(logits, y)


def cw_loss(logits: Tensor, y) -> Tensor:
    return T.mean(margin(logits, y))


def _pgd(x, cfg: AttackConfig, rng, objective: Callable[[Tensor], Tensor]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = cfg.clamp_lo, cfg.clamp_hi
    if cfg.random_init and cfg.steps > 0:
        if rng is None:
            raise ValueError("random_init needs an rng")
        x_adv = random_init(x, cfg.epsilon, rng, lo, hi)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        xt = Tensor(x_adv, requires_grad=True)
        objective(xt).backward()
        x_adv = project_linf(x_adv + cfg.step_size * np.sign(xt.grad), x, cfg.epsilon, lo, hi)
    return project_linf(x_adv, x, cfg.epsilon, lo, hi)


def _base_objective(params: ModelParams, x, y, loss: str, clean_probs=None):
    if loss == "ce":
        return lambda logits: T.softmax_cross_entropy(logits, y)
    if loss == "cw":
        return lambda logits: cw_loss(logits, y)
    if loss == "trades_kl":
        if clean_probs is None:
            clean_probs = T.softmax(forward(params, x)).data
        p = Tensor(clean_probs)
        return lambda logits: kl_divergence(p, T.softmax(logits))
    raise ValueError(f"unknown attack loss {loss!r}; choose from {LOSSES}")


def pgd_attack(params: ModelParams, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None,
               loss: str = "ce", clean_probs=None) -> np.ndarray:
    """Signed-gradient ascent on ``loss`` projected onto the epsilon-ball and input box.

    ``loss`` is ``"ce"``, ``"cw"`` (logit margin) or ``"trades_kl"``
    (KL from the clean prediction, optionally given as ``clean_probs``).
    """
    params = params.detached()
    base = _base_objective(params, x, y, loss, clean_probs)
    return _pgd(x, cfg, rng, lambda xt: base(forward(params, xt)))


def pgd_mt_attack(student: ModelParams, teacher: ModelParams, x, y, cfg: AttackConfig, lambda_t: float,
                  rng: np.random.Generator | None = None, kind: ConsistencyKind = ConsistencyKind.MSE,
                  loss: str = "ce") -> np.ndarray:
    """PGD on ``loss + lambda_t * consistency`` against the teacher's clean prediction.

    The teacher is evaluated once on clean x; with ``lambda_t == 0`` this is
    exactly :func:`pgd_attack`.
    """
    check_same_arch(student, teacher)
    if lambda_t < 0:
        raise ValueError(f"lambda_t must be >= 0, got {lambda_t}")
    if lambda_t == 0:
        return pgd_attack(student, x, y, cfg, rng, loss=loss)
    student = student.detached()
    base = _base_objective(student, x, y, loss)
    p_t = teacher_probs(teacher, x)

    def objective(xt):
        logits = forward(student, xt)
        return base(logits) + lambda_t * mt_consistency(logits, p_t, kind)

    return _pgd(x, cfg, rng, objective)


def cw_inf_attack(params: ModelParams, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    if params.arch[-1] < 2:
        raise ValueError("C&W margin needs at least two classes")
    return pgd_attack(params, x, y, cfg, rng, loss="cw")
