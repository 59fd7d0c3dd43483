"""Plain SGD-with-momentum and Adam, operating on leaf Tensors in place."""

from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, params, lr: float = 0.05, momentum: float = 0.9):
        self.params = list(params)
        self.lr = np.float32(lr)
        self.momentum = np.float32(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = np.float32(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        # bias-corrected step size folded into lr
        lr_t = np.float32(
            self.lr * np.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        )
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr_t * m / (np.sqrt(v) + self.eps)
