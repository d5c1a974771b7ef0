"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor, backward, no_grad


def numeric_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5,
                 indices=None) -> np.ndarray:
    """(fn(x + eps·e) - fn(x - eps·e)) / (2·eps) at each requested flat index."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(fn(Tensor(x)))
            flat[i] = orig - eps
            fm = _scalar(fn(Tensor(x)))
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def _scalar(y: Tensor) -> float:
    if y.size != 1:
        raise ShapeError(f"grad_check: function must return a scalar, got shape {y.shape}")
    return float(y.data.reshape(-1)[0])


def analytic_grad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    y = fn(xt)
    _scalar(y)
    if not y.requires_grad:
        return np.zeros_like(xt.data)
    backward(y)
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-5, indices=None) -> float:
    """Max relative error between backprop and central differences.

    The denominator per element is ``max(|analytic|, |numeric|, 1e-8)``.
    ``indices`` restricts the comparison to a subset of flat positions.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    ana = analytic_grad(fn, x).reshape(-1)
    num = numeric_grad(fn, x, eps, indices).reshape(-1)
    sel = np.arange(x.size) if indices is None else np.asarray(list(indices))
    a, n = ana[sel], num[sel]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))
