"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward


def _projected(fn, inputs, proj) -> float:
    out = fn(*inputs)
    return float(np.sum(out.data.astype(np.float64) * proj))


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], proj: np.ndarray,
                 eps: float = 1e-3) -> list:
    """d<fn(inputs), proj>/d input by central differences, one entry at a time."""
    grads = []
    for t in inputs:
        if not t.requires_grad:
            grads.append(None)
            continue
        g = np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            plus = _projected(fn, inputs, proj)
            flat[i] = orig - eps
            lo = float(flat[i])
            minus = _projected(fn, inputs, proj)
            flat[i] = orig
            # divide by the step actually representable in float32
            g.reshape(-1)[i] = (plus - minus) / (hi - lo)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], proj: np.ndarray) -> list:
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        loss = ops.sum(ops.mul(out, Tensor(proj)))
    backward(loss, tape)
    return [t.grad.astype(np.float64) if t.requires_grad and t.grad is not None
            else (np.zeros(t.shape) if t.requires_grad else None) for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
                    seed: int = 0) -> list:
    """Relative error between analytic and numeric gradients for each differentiable input.

    The scalar being differentiated is ``<fn(*inputs), r>`` for a fixed random
    projection ``r``, which exercises every output element.
    """
    out = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    ana = analytic_grad(fn, inputs, proj)
    num = numeric_grad(fn, inputs, proj, eps)
    return [relative_error(a, n) for a, n in zip(ana, num) if a is not None]
