"""AdamW, warm-up + cosine learning-rate schedule and global-norm clipping."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def lr_schedule(step: int, warmup: int, horizon: int, lr_max: float) -> float:
    """Linear ramp 0 -> lr_max over ``warmup`` steps, then cosine decay to 0 at ``horizon``."""
    if warmup and step < warmup:
        return lr_max * step / warmup
    if horizon <= warmup:
        return lr_max
    progress = min(max((step - warmup) / (horizon - warmup), 0.0), 1.0)
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: Sequence[Tensor], max_norm: float = 5.0) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    total = 0.0
    for g in grads:
        total += float(np.dot(g.data.ravel(), g.data.ravel()))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.data = g.data * scale
    return norm


class AdamW:
    """Adam with decoupled weight decay over named parameters."""

    def __init__(
        self,
        params: Iterable[tuple[str, Tensor]],
        lr: float = 3e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.005,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"no gradient for trainable parameter {name!r}")
            if not np.isfinite(p.grad.data).all():
                raise NonFiniteError(f"non-finite gradient in {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad.data
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            # fresh array: earlier graph closures may still hold the old one
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * update

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adamw_step(opt: AdamW, step: int, warmup: int, horizon: int, lr_max: float) -> float:
    """One optimizer update at the scheduled learning rate; returns that rate."""
    lr = lr_schedule(step, warmup, horizon, lr_max)
    opt.step(lr)
    return lr
