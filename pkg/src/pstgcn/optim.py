from __future__ import annotations

import numpy as np


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * value``;
    ``value <- value - lr * v``. Gradients are zeroed after each step.
    """

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)  # (name, Parameter) pairs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.value) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity)


def sgd_step(params, lr, momentum, weight_decay, velocity):
    """Functional form of one :class:`SGD` update; ``velocity`` maps name -> array."""
    for name, p in params:
        if p.trainable:
            v = velocity.setdefault(name, np.zeros_like(p.value))
            v *= momentum
            v += p.grad
            if weight_decay:
                v += weight_decay * p.value
            p.value -= lr * v
        p.zero_grad()


def step_lr(epoch: int, base_lr: float, milestones=(), gamma: float = 0.1) -> float:
    """Learning rate at a 0-based epoch: divided by ``1/gamma`` at each milestone passed."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)
