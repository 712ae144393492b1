"""First-order optimizers over flat parameter vectors."""

from __future__ import annotations

import numpy as np


class Sgd:
    def __init__(self, size: int, lr: float):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.lr == 0.0:
            return params
        return params - self.lr * grad


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        if self.lr == 0.0:
            return params
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, size: int, lr: float):
    if name == "adam":
        return Adam(size, lr)
    if name == "sgd":
        return Sgd(size, lr)
    raise ValueError(f"unknown optimizer {name!r}")
