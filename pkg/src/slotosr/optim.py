"""SGD and Adam on named parameter dicts, plus the step-halving lr schedule."""

from __future__ import annotations

import numpy as np


class SGD:
    """Plain gradient descent. ``step_count`` increases by one per step."""

    kind = "sgd"

    def __init__(self, params, learning_rate):
        if learning_rate <= 0.0:
            raise ValueError(f"SGD: learning rate must be positive, got {learning_rate}")
        self.params = dict(params)
        self.learning_rate = float(learning_rate)
        self.step_count = 0

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.values -= self.learning_rate * p.grad
        self.step_count += 1

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    kind = "adam"

    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        if learning_rate <= 0.0:
            raise ValueError(f"Adam: learning rate must be positive, got {learning_rate}")
        self.params = dict(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.values) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / (1.0 - self.beta1 ** t)
            v_hat = self.v[k] / (1.0 - self.beta2 ** t)
            p.values -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def halved_lr(base_lr, epoch, halve_every):
    """Learning rate halved every ``halve_every`` epochs (epoch is 0-based)."""
    if halve_every <= 0:
        return base_lr
    return base_lr * (0.5 ** (epoch // halve_every))
