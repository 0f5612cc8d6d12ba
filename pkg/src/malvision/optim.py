"""AdamW with decoupled weight decay, warmup+cosine schedule, parameter EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, OptimError
from .tensor import Tensor

REFERENCE_LR = 1.5e-4
REFERENCE_BATCH = 256

# decay applies to weight matrices only, never to gains, biases,
# positional tables, or the mask token
_NO_DECAY_SUFFIXES = ("pos", "mask_token")


def wants_decay(name: str, param: Tensor) -> bool:
    if param.data.ndim < 2:
        return False
    return not name.endswith(_NO_DECAY_SUFFIXES)


@dataclass
class OptimState:
    """Per-parameter moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05

    @classmethod
    def for_params(cls, params: dict[str, Tensor], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.05) -> "OptimState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimState, lr: float) -> None:
    """One bias-corrected AdamW update, in place.

    A non-finite gradient rejects the whole step (no parameter moves, the
    step counter does not advance) and raises naming the parameter.
    """
    if lr < 0:
        raise OptimError(f"negative learning rate {lr}")
    for name in params:
        g = grads.get(name)
        if g is None:
            raise OptimError(f"missing gradient for {name}")
        if g.shape != params[name].data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape "
                f"{params[name].data.shape} for {name}")
        if not np.isfinite(g).all():
            raise OptimError(f"step rejected: non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and wants_decay(name, p):
            p.data = p.data - lr * state.weight_decay * p.data
        p.data = p.data - lr * update


@dataclass
class Schedule:
    """Linear warmup to ``base_lr`` followed by cosine decay to zero."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise DimensionError(
                f"bad schedule extents (warmup {self.warmup_steps}, "
                f"total {self.total_steps})")

    @classmethod
    def from_epochs(cls, base_lr: float, warmup_epochs: float, epochs: int,
                    steps_per_epoch: int) -> "Schedule":
        total = max(1, epochs * steps_per_epoch)
        warmup = min(total, int(round(warmup_epochs * steps_per_epoch)))
        return cls(base_lr=base_lr, warmup_steps=warmup, total_steps=total)


def base_lr_for_batch(batch_size: int, reference_lr: float = REFERENCE_LR) -> float:
    """Linear batch-size scaling rule: reference_lr * batch / 256."""
    if batch_size < 1:
        raise DimensionError(f"batch size must be positive, got {batch_size}")
    return reference_lr * batch_size / REFERENCE_BATCH


def lr_at(step: int, schedule: Schedule) -> float:
    """Learning rate at an integer step in [0, total_steps]."""
    if not 0 <= step <= schedule.total_steps:
        raise DimensionError(
            f"step {step} outside schedule [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.base_lr
    progress = (step - schedule.warmup_steps) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class EmaState:
    """Shadow copies of the parameters with exponential decay ``mu``."""

    shadow: dict[str, np.ndarray]
    decay: float = 0.9999

    @classmethod
    def from_params(cls, params: dict[str, Tensor],
                    decay: float = 0.9999) -> "EmaState":
        return cls(shadow={k: p.data.copy() for k, p in params.items()},
                   decay=decay)


def ema_update(ema: EmaState, params: dict[str, Tensor]) -> None:
    """shadow <- mu * shadow + (1 - mu) * params, in place."""
    mu = ema.decay
    for name, p in params.items():
        s = ema.shadow[name]
        if s.shape != p.data.shape:
            raise DimensionError(f"EMA shadow shape mismatch for {name}")
        s *= mu
        s += (1.0 - mu) * p.data


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    sq = 0.0
    for g in grads.values():
        sq += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(sq)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm
