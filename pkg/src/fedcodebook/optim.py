"""First-order optimizers over named parameter lists.

Both optimizers mutate parameter data in place; the caller owns the
parameter bundle (clones are made wherever bundles are cached or
shared).  State is keyed by position in the parameter list, so the
list must stay stable across steps.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def step(self, grads: dict[Tensor, np.ndarray]):
        for p in self.params:
            p.data -= self.lr * grads[p]


class Adam:
    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = grads[p]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params: list[Tensor], lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ConfigError(f"unknown optimizer {kind!r} (expected adam or sgd)")
