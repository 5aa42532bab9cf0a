"""AdamW with decoupled weight decay and the warmup+cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .module import Module
from .tensor import Tensor


@dataclass
class AdamWState:
    """Per-parameter moment estimates; ``step`` counts completed updates."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param: Tensor, **kwargs) -> "AdamWState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data), **kwargs)


def adamw_step(param: Tensor, grad: np.ndarray, state: AdamWState, lr: float) -> None:
    """One AdamW update, in place.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2; bias-corrected m_hat/v_hat;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
    """
    if grad.shape != param.data.shape:
        raise ValueError(f"adamw_step: grad shape {grad.shape} != param shape {param.data.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    update = lr * m_hat / (np.sqrt(v_hat) + state.eps) + lr * state.weight_decay * param.data
    param.data = param.data - update.astype(param.data.dtype, copy=False)


class AdamW:
    """Optimizer over a module's parameters, keeping one state per tensor."""

    def __init__(
        self,
        module: Module,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self._named = list(module.named_parameters())
        self.states = {
            name: AdamWState.for_param(p, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
            for name, p in self._named
        }

    def step(self, lr: float) -> None:
        for name, p in self._named:
            if p.grad is None:
                continue
            adamw_step(p, p.grad, self.states[name], lr)

    def zero_grad(self) -> None:
        for _, p in self._named:
            p.grad = None


@dataclass
class LrSchedule:
    """Linear warmup to ``peak_lr`` followed by cosine decay to zero."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ValueError(f"invalid schedule: warmup {self.warmup_steps} vs total {self.total_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    if span == 0:
        return schedule.peak_lr
    progress = (step - schedule.warmup_steps) / span
    return schedule.peak_lr * 0.5 * (1.0 + float(np.cos(np.pi * progress)))
