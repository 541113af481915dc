"""AdamW with decoupled weight decay, plus the learning-rate schedules."""

from __future__ import annotations

import math

import numpy as np

from cmoe.tensor import Tensor


class AdamW:
    """theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.

    The decay term uses the pre-update parameter value and never touches the
    moments. Parameters whose grad is absent at step() are skipped, so frozen
    parameters are legal; their step counters do not advance.
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.t[i] += 1
            t = self.t[i]
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / (1.0 - b1**t)
            v_hat = self.v[i] / (1.0 - b2**t)
            p.data -= (
                self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                + self.lr * self.weight_decay * p.data
            ).astype(p.data.dtype, copy=False)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Decay from base_lr at epoch 0 toward 0 at the final epoch."""
    if total_epochs <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def constant_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    return base_lr


SCHEDULES = {"cosine": cosine_lr, "constant": constant_lr}
