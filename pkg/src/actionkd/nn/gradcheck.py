"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


class GradCheckError(RuntimeError):
    pass


def grad_check(
    scalar_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
) -> float:
    """Max relative error between tape gradients and central differences.

    `scalar_fn` must be a deterministic closure over `params` returning a
    scalar Tensor. Every element of every parameter is perturbed by ±eps;
    relative error is |a − n| / max(1e-8, |a| + |n|).
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = scalar_fn()
    if loss.data.size != 1:
        raise GradCheckError("scalar_fn must return a scalar")
    if not np.isfinite(loss.data):
        raise GradCheckError(f"non-finite loss {float(loss.data)}")
    loss.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]

    max_err = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(scalar_fn().data)
            flat[j] = orig - eps
            f_minus = float(scalar_fn().data)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError("non-finite loss during perturbation")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(a_flat[j] - numeric) / max(1e-8, abs(a_flat[j]) + abs(numeric))
            if rel > max_err:
                max_err = rel
    return max_err
