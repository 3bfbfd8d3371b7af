"""Classic SGD with momentum and weight decay, plus the cosine schedule."""

from __future__ import annotations

import numpy as np


def sgd_step(param, grad, velocity, lr, momentum, weight_decay):
    """One update: g <- grad + wd*w; v <- m*v + g; w <- w - lr*v."""
    g = grad + weight_decay * param
    v = momentum * velocity + g
    return param - lr * v, v


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self._velocity[i] = sgd_step(
                p.data, p.grad, self._velocity[i], self.lr, self.momentum, self.weight_decay)


def cosine_lr(base_lr, epoch, total_epochs, warmup_epochs=0):
    """Linear warmup then cosine decay to zero, evaluated per epoch."""
    if total_epochs <= 0:
        return base_lr
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = max(1, total_epochs - warmup_epochs)
    progress = (epoch - warmup_epochs) / span
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * progress))
