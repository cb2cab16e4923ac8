"""Adam with bias correction and coupled (L2) weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DTYPE, ContractError, Tensor

_TINY = np.finfo(DTYPE).tiny


def _flush_subnormal(a: np.ndarray) -> None:
    # subnormal float32 operands slow BLAS matmuls by two orders of magnitude
    a[np.abs(a) < _TINY] = 0.0


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 4e-4
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """Apply one Adam update in place, then zero every gradient.

    Parameters are keyed by ``name`` (falling back to position) so the moment
    buffers survive a checkpoint round trip.
    """
    keys = [p.name if p.name is not None else str(i) for i, p in enumerate(params)]
    for key, p in zip(keys, params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {key!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    inv_sqrt_corr2 = 1.0 / np.sqrt(1.0 - b2 ** t)
    for key, p in zip(keys, params):
        # update arithmetic in float64; moments are stored as float32
        g = p.grad.astype(np.float64)
        if state.weight_decay:
            g += state.weight_decay * p.data
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ContractError(f"adam_step: moment shape {m.shape} != parameter {p.shape} for {key!r}")
        v = state.v[key]
        m64 = b1 * m + (1 - b1) * g
        v64 = b2 * v + (1 - b2) * (g * g)
        m[...] = m64
        v[...] = v64
        p.data -= (step_size * m64 / (np.sqrt(v64) * inv_sqrt_corr2 + state.eps)).astype(DTYPE)
        for buf in (m, v, p.data):
            _flush_subnormal(buf)
        p.grad = np.zeros_like(p.data)
