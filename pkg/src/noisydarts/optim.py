"""Optimizers for the two levels of the search.

Weights use momentum SGD with a cosine learning-rate schedule and decoupled
weight decay; architecture logits use Adam with a constant learning rate.
Both operate in place on ``Tensor.data`` of a named parameter dict.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["cosine_lr", "clip_grad_norm", "SGD", "Adam"]


def cosine_lr(lr0: float, epoch: int, total_epochs: int, lr_min: float = 0.0) -> float:
    """``lr_min + (lr0 - lr_min) * (1 + cos(pi * epoch / total)) / 2``."""
    if total_epochs <= 0:
        return lr0
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    grads = dict(grads)
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        grads = {k: g * factor for k, g in grads.items()}
    return grads


def _check(grads: Mapping[str, np.ndarray], params: Mapping[str, Tensor]) -> None:
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].data.shape} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")


class SGD:
    """Momentum SGD: ``v <- m*v + g``; ``w <- w - lr*v - lr*wd*w``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.025, momentum: float = 0.9,
                 weight_decay: float = 3e-4, lr_min: float = 0.0, total_epochs: int = 1):
        self.params = dict(params)
        self.lr0, self.lr_min = lr, lr_min
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.total_epochs = total_epochs
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(self.lr0, epoch, self.total_epochs, self.lr_min)

    def step(self, grads: Mapping[str, np.ndarray], epoch: int) -> float:
        _check(grads, self.params)
        lr = self.lr_at(epoch)
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v += g
            w = self.params[k].data
            if self.weight_decay:
                w -= lr * self.weight_decay * w
            w -= lr * v
        return lr

    def state_dict(self) -> dict:
        return {"velocity": {k: v.copy() for k, v in self.velocity.items()}}


class Adam:
    """Adam with bias correction and L2 weight decay folded into the gradient."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 3e-4, betas=(0.5, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-3):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        _check(grads, self.params)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            w = self.params[k].data
            if self.weight_decay:
                g = g + self.weight_decay * w
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}
