"""Adaptive-moment gradient descent over named tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(p.grad**2) for p in self.params.values() if p.grad is not None)))

    def step(self):
        self.t += 1
        scale = 1.0
        if self.clip_norm is not None:
            gn = self.grad_norm()
            if gn > self.clip_norm:
                scale = self.clip_norm / gn
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.value = p.value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
