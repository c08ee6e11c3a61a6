"""Minimal first-order optimizers over flat numpy parameter vectors."""

from __future__ import annotations

import math

import numpy as np


class Adam:
    """Adam on a flat parameter vector; ``step`` takes a gradient of the loss
    being *minimized* and returns new parameters."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def direction(self, grad, lr=None):
        """Update vector for ``grad`` without committing the moment estimates."""
        lr = self.lr if lr is None else lr
        t = self.t + 1
        m = (1 - self.b1) * grad
        v = (1 - self.b2) * grad * grad
        if self.m is not None:
            m = m + self.b1 * self.m
            v = v + self.b2 * self.v
        mhat = m / (1 - self.b1**t)
        vhat = v / (1 - self.b2**t)
        return -lr * mhat / (np.sqrt(vhat) + self.eps), (m, v, t)

    def step(self, params, grad, lr=None):
        delta, state = self.direction(np.asarray(grad, dtype=float), lr)
        self.commit(state)
        return np.asarray(params, dtype=float) + delta

    def commit(self, state):
        self.m, self.v, self.t = state


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def direction(self, grad, lr=None):
        lr = self.lr if lr is None else lr
        return -lr * np.asarray(grad, dtype=float), None

    def step(self, params, grad, lr=None):
        return np.asarray(params, dtype=float) + self.direction(grad, lr)[0]

    def commit(self, state):
        pass


def make_optimizer(name: str, lr: float, beta2: float = 0.999):
    if name == "adam":
        return Adam(lr, betas=(0.9, beta2))
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * min(step, total - 1) / (total - 1)))
