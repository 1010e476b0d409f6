"""In-place optimizers over float32 parameter storage.

Gradients and optimizer state are float64; parameters are updated in double
precision and rounded back to float32, so a run is a deterministic function
of its seed.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class SGD:
    def __init__(self, params: Sequence[np.ndarray], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros(p.shape) for p in self.params] if momentum else None

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            if self._vel is not None:
                self._vel[i] = self.momentum * self._vel[i] + g
                g = self._vel[i]
            p[...] = (p.astype(np.float64) - lr * g).astype(np.float32)


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self._m[i] = self.b1 * self._m[i] + (1 - self.b1) * g
            self._v[i] = self.b2 * self._v[i] + (1 - self.b2) * g * g
            upd = (self._m[i] / c1) / (np.sqrt(self._v[i] / c2) + self.eps)
            p[...] = (p.astype(np.float64) - lr * upd).astype(np.float32)


def make_optimizer(name: str, params, lr: float):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def step_decay(base_lr: float, total: int, milestones=(0.5, 0.75), factor: float = 0.1) -> Callable[[int], float]:
    """Piecewise-constant schedule: multiply by ``factor`` at each milestone fraction."""
    cuts = [int(m * total) for m in milestones]

    def lr_at(step: int) -> float:
        return base_lr * factor ** sum(step >= c for c in cuts)

    return lr_at
