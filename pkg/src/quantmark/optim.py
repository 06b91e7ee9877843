from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor


class AdamW:
    """Decoupled-weight-decay Adam over a list of tensors.

    Parameters whose ``grad`` is None at step time are skipped entirely (their
    moments are left untouched), which is how frozen parameters are handled.
    """

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        lr, b1, b2 = DTYPE(self.lr), DTYPE(self.b1), DTYPE(self.b2)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / DTYPE(c1)
            vhat = v / DTYPE(c2)
            if self.weight_decay:
                p.data *= DTYPE(1.0 - self.lr * self.weight_decay)
            p.data -= lr * mhat / (np.sqrt(vhat) + DTYPE(self.eps))
