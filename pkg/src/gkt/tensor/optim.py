"""Momentum SGD and Adam over lists of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    variant: str
    lr: float
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    buffers: list = field(default_factory=list)
    second: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        if self.variant not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer variant {self.variant!r}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


def _check(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state_bufs: list) -> None:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} but gradient shape {g.shape}")
    if state_bufs:
        if len(state_bufs) != len(params):
            raise ValueError(f"optimizer state holds {len(state_bufs)} buffers for {len(params)} parameters")
        for i, (p, b) in enumerate(zip(params, state_bufs)):
            if p.shape != b.shape:
                raise ValueError(f"parameter {i}: shape {p.shape} but state buffer shape {b.shape}")


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """In-place ``v = mu*v + (g + wd*p); p -= lr*v``."""
    _check(params, grads, state.buffers)
    if not state.buffers:
        state.buffers = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.buffers):
        if state.weight_decay:
            g = g + state.weight_decay * p
        v *= state.momentum
        v += g
        p -= state.lr * v
    state.step += 1


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState) -> None:
    """In-place bias-corrected Adam with L2 weight decay folded into the gradient."""
    _check(params, grads, state.buffers)
    if not state.buffers:
        state.buffers = [np.zeros_like(p) for p in params]
        state.second = [np.zeros_like(p) for p in params]
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.buffers, state.second):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Optimizer:
    """Owns a parameter list and an :class:`OptimizerState`.

    Parameters without a gradient after backward (unused in the forward pass)
    are treated as having a zero gradient.
    """

    def __init__(self, params: Iterable[Tensor], state: OptimizerState):
        self.params = [p for p in params if p.requires_grad]
        self.state = state

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        datas = [p.data for p in self.params]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.state.variant == "adam":
            adam_step(datas, grads, self.state)
        else:
            sgd_momentum_step(datas, grads, self.state)


def SGD(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> Optimizer:
    return Optimizer(params, OptimizerState("sgd_momentum", lr=lr, momentum=momentum, weight_decay=weight_decay))


def Adam(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> Optimizer:
    return Optimizer(params, OptimizerState("adam", lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))
