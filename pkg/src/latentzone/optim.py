"""Adam with per-group learning rates and global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(
        self,
        groups: list[tuple[list[tuple[str, Tensor]], float]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for params, _ in self.groups for name, p in params}
        self.v = {name: np.zeros_like(p.data) for params, _ in self.groups for name, p in params}

    def all_params(self) -> list[tuple[str, Tensor]]:
        return [item for params, _ in self.groups for item in params]

    def zero_grad(self):
        for _, p in self.all_params():
            p.zero_grad()

    def clip_global_norm(self, max_norm: float) -> float:
        """Scale all gradients so the global norm is at most max_norm.

        Returns the pre-clip global norm."""
        total = 0.0
        for _, p in self.all_params():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = float(np.sqrt(total))
        if norm > max_norm > 0.0:
            scale = max_norm / norm
            for _, p in self.all_params():
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for params, lr in self.groups:
            for name, p in params:
                g = p.grad
                if g is None:
                    continue
                m = self.m[name]
                v = self.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.data -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
