"""Losses, client optimizers and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError

LOSS_KINDS = ("cross_entropy", "weighted_focal")
OPTIMIZER_KINDS = ("sgd", "sgd_momentum", "adam")


@dataclass
class LossConfig:
    kind: str = "cross_entropy"
    class_weights: np.ndarray | None = None
    gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {self.kind!r}")
        if self.gamma < 0:
            raise ValidationError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.class_weights is not None:
            self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(self.class_weights <= 0):
                raise ValidationError("class weights must be > 0")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(cfg: LossConfig, logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean per-sample loss and its gradient w.r.t. the logits.

    Weighted focal loss per sample is ``-w[y] * (1 - p_y)**gamma * log(p_y)``
    with ``p = softmax(logits)``; gamma = 0 and unit weights reduce it to
    cross-entropy.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"{B} logit rows but {labels.size} labels")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValidationError("label out of range")

    logp = log_softmax(logits)
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    onehot[np.arange(B), labels] = 1.0
    logp_y = logp[np.arange(B), labels]

    if cfg.kind == "cross_entropy":
        losses = -logp_y
        coef = np.ones(B)
    else:
        w = np.ones(C) if cfg.class_weights is None else cfg.class_weights
        if w.shape != (C,):
            raise DimensionError(f"{w.size} class weights for {C} classes")
        wy = w[labels]
        py = np.exp(logp_y)
        q = -np.expm1(logp_y)  # 1 - p_y without cancellation
        gam = cfg.gamma
        losses = -wy * q**gam * logp_y
        # d loss / d logit_k = -w * [q^g - g * p * q^(g-1) * log p] * (onehot_k - p_k)
        if gam == 0:
            extra = np.zeros(B)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                extra = np.where(q > 0, gam * py * q ** (gam - 1.0) * logp_y, 0.0)
        coef = wy * (q**gam - extra)
    dlogits = (coef[:, None] * (p - onehot)) / B
    return float(losses.mean()), dlogits


def inverse_frequency_weights(labels, num_classes: int) -> np.ndarray:
    """Weights proportional to 1/count per class, normalised to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)[:num_classes]
    n = max(len(labels), 1)
    raw = n / (num_classes * np.maximum(counts, 1).astype(np.float64))
    return raw / raw.mean()


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def schedule_lr(schedule: str, step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if schedule == "constant":
        return lr_max
    if schedule == "cosine":
        return cosine_lr(step, total_steps, lr_max, lr_min)
    raise ValidationError(f"unknown schedule {schedule!r}")


@dataclass
class OptimizerState:
    kind: str
    lr_base: float
    size: int
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValidationError(f"unknown optimizer {self.kind!r}")
        if not self.buffers:
            nbuf = {"sgd": 0, "sgd_momentum": 1, "adam": 2}[self.kind]
            self.buffers = [np.zeros(self.size) for _ in range(nbuf)]

    def reset(self) -> None:
        self.step_count = 0
        for b in self.buffers:
            b[:] = 0.0


def optimizer_step(opt: OptimizerState, params: np.ndarray, grad: np.ndarray, lr_now: float) -> np.ndarray:
    """Return updated params; ``opt`` buffers and step count advance in place."""
    if params.shape != grad.shape or params.shape != (opt.size,):
        raise DimensionError(f"params {params.shape}, grad {grad.shape}, optimizer size {opt.size}")
    opt.step_count += 1
    if opt.kind == "sgd":
        return params - lr_now * grad
    if opt.kind == "sgd_momentum":
        buf = opt.buffers[0]
        buf *= opt.momentum
        buf += grad
        return params - lr_now * buf
    m, v = opt.buffers
    m *= opt.beta1
    m += (1 - opt.beta1) * grad
    v *= opt.beta2
    v += (1 - opt.beta2) * grad * grad
    t = opt.step_count
    m_hat = m / (1 - opt.beta1**t)
    v_hat = v / (1 - opt.beta2**t)
    return params - lr_now * m_hat / (np.sqrt(v_hat) + opt.epsilon)
