"""AdamW with decoupled weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam moments plus weight decay applied directly to the parameters.

    The decay step θ ← θ·(1 − lr·wd) happens independently of the moment
    update, so zero gradients still shrink weights by exactly that factor.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-5,
        weight_decay: float = 1e-7,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay != 0.0:
                p.data *= 1.0 - self.lr * self.weight_decay
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
