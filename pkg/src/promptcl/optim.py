"""Decoupled-weight-decay Adam and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .tensor import Tensor


class AdamW:
    """Adam with weight decay applied directly to the parameters.

    State is keyed by parameter identity; construct a fresh optimizer per
    training stage (the trainable set changes as the pool grows).
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise InputError("lr/eps/weight_decay out of range")
        if not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise InputError(f"betas must lie in [0, 1), got {betas}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * (update + self.weight_decay * p.data)).astype(p.data.dtype)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, floor: float = 0.0,
              warmup: int = 0) -> float:
    """Cosine decay from ``base_lr`` to ``floor``, with optional linear warmup.

    During the first ``warmup`` epochs the rate ramps from base_lr/warmup up
    to base_lr, which keeps fresh transformer stacks from collapsing at a hot
    initial step; the cosine arc then spans the remaining epochs.
    """
    if warmup > 0 and epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    if total_epochs - warmup <= 1:
        return base_lr
    frac = (epoch - warmup) / (total_epochs - 1 - warmup)
    frac = min(max(frac, 0.0), 1.0)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class OptimSettings:
    """AdamW hyperparameters as a config-friendly bundle."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_epochs: int = 3

    def __post_init__(self):
        if self.lr < 0:
            raise InputError(f"lr must be non-negative, got {self.lr}")
        if self.warmup_epochs < 0:
            raise InputError(f"warmup_epochs must be non-negative, got {self.warmup_epochs}")

    def build(self, params) -> AdamW:
        return AdamW(params, lr=self.lr, betas=(self.beta1, self.beta2),
                     eps=self.eps, weight_decay=self.weight_decay)
