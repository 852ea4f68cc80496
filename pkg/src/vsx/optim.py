"""Adam, plateau learning-rate decay, gradient accumulation and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import GraphStateError
from .tensor import Tensor, backward


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """One bias-corrected Adam update applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise GraphStateError(f"optimizer tracks {len(state.m)} parameters, got {len(params)}")
    for p in params:
        if p.grad is None:
            raise GraphStateError(f"parameter {p.name or '?'} has no gradient; run backward first")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps, weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` once the monitored loss has gone
    ``patience + 1`` consecutive epochs without a new minimum."""

    def __init__(self, optimizer: Adam, factor: float = 0.1, patience: int = 2, min_lr: float = 0.0):
        if not 0.0 < factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if patience < 0:
            raise ValueError("patience must be >= 0")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.num_bad = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.num_bad > self.patience:
            self.optimizer.lr = max(self.optimizer.lr * self.factor, self.min_lr)
            self.num_bad = 0
        return self.optimizer.lr


def plateau_schedule(history: Sequence[float], lr: float, factor: float = 0.1, patience: int = 2) -> list[float]:
    """Learning rate in effect after each epoch of ``history``."""
    opt = Adam([], lr=lr)
    sched = ReduceLROnPlateau(opt, factor, patience)
    return [sched.step(x) for x in history]


class EarlyStopping:
    """Signal a stop once ``patience`` epochs pass without improving by more than ``min_delta``."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-4):
        if patience < 0:
            raise ValueError("patience must be >= 0")
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0
        self.epoch = -1

    def step(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = self.epoch
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def early_stop(history: Sequence[float], patience: int, min_delta: float = 1e-4) -> bool:
    stopper = EarlyStopping(patience, min_delta)
    stop = False
    for x in history:
        stop = stopper.step(x)
        if stop:
            break
    return stop


class GradientAccumulator:
    """Backward each minibatch loss into the shared grads; every ``steps`` minibatches,
    average the accumulated grads, take an optimizer step and clear them."""

    def __init__(self, optimizer: Adam, steps: int = 4):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        self.optimizer = optimizer
        self.steps = steps
        self.pending = 0
        self.updates = 0

    def accumulate(self, loss: Tensor) -> bool:
        backward(loss)
        self.pending += 1
        if self.pending >= self.steps:
            self._apply()
            return True
        return False

    def flush(self) -> bool:
        """Step with whatever is pending (end of epoch)."""
        if self.pending == 0:
            return False
        self._apply()
        return True

    def _apply(self) -> None:
        scale = 1.0 / self.pending
        for p in self.optimizer.params:
            if p.grad is not None:
                p.grad *= scale
            else:
                p.grad = np.zeros_like(p.data)
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.pending = 0
        self.updates += 1
