"""Adam with per-group learning rates."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(self, groups: list[tuple[list[Tensor], float]], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def parameters(self) -> list[Tensor]:
        return [p for params, _ in self.groups for p in params]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.values)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                key = id(p)
                m = self._m.setdefault(key, np.zeros_like(p.values))
                v = self._v.setdefault(key, np.zeros_like(p.values))
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad * p.grad
                p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
