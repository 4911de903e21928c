"""Adam update rule for named numpy parameter arrays, plus the cosine-then-freeze schedule."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    def __init__(self, params: dict, lr: dict | float, betas=(0.9, 0.999), eps: float = 1e-15):
        self.lr = lr if isinstance(lr, dict) else {k: float(lr) for k in params}
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, scale: float = 1.0) -> dict:
        """Return updated copies of ``params``; ``scale`` multiplies every learning rate."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = self.lr[k] * scale * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = p - step
        return out

    def keep(self, mask) -> None:
        """Drop moment rows for removed parameters (leading axis)."""
        for k in self.m:
            self.m[k] = self.m[k][mask]
            self.v[k] = self.v[k][mask]


def cosine_freeze(iteration: int, anneal_iters: int, final_fraction: float = 0.01) -> float:
    """Learning-rate multiplier: cosine decay to ``final_fraction`` then 0 (frozen)."""
    if iteration >= anneal_iters:
        return 0.0
    return final_fraction + (1 - final_fraction) * 0.5 * (1 + math.cos(math.pi * iteration / anneal_iters))
