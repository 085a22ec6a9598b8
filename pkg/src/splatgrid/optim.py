"""Adam with a linear warm-up then cosine-decay learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Schedule:
    peak: float
    warmup: int
    total: int
    floor: float = 0.0

    def __post_init__(self):
        if not self.peak > 0:
            raise ValueError("peak learning rate must be positive")
        if self.total < 1 or self.warmup < 0:
            raise ValueError("need total >= 1 and warmup >= 0")

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(1, self.total - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.floor + (self.peak - self.floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam on a list of numpy arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray | None], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
