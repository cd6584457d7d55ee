"""RMSProp and a step learning-rate schedule."""

import numpy as np


class RMSProp:
    """RMSProp over a fixed list of parameter tensors.

    acc <- decay * acc + (1 - decay) * g**2
    p   <- p - lr * g / (sqrt(acc) + eps)
    """

    def __init__(self, params, lr=0.01, decay=0.99, eps=1e-8):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0, 1), got {decay}")
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.steps = 0
        self.acc = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} (shape {p.shape}) has no gradient")
        for p, acc in zip(self.params, self.acc):
            g = p.grad
            acc *= self.decay
            acc += (1.0 - self.decay) * g * g
            p.data -= self.lr * g / (np.sqrt(acc) + self.eps)
            p.grad = None
        self.steps += 1

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        return {f"acc.{i}": a for i, a in enumerate(self.acc)}


def step_lr(base_lr, epoch, boundaries, factor=0.1):
    """lr after multiplying by ``factor`` at each boundary epoch already reached."""
    drops = sum(1 for b in boundaries if epoch >= b)
    return base_lr * factor ** drops


def every_n(total_epochs, n):
    """Boundaries at n, 2n, ... below ``total_epochs`` (the 'x0.1 every 30 epochs' form)."""
    return list(range(n, total_epochs, n))
