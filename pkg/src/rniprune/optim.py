"""SGD with momentum and coupled L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(param: Tensor, state: OptimState, key: str = None) -> Tensor:
    """In-place update of ``param``::

        g   <- grad + weight_decay * param
        buf <- momentum * buf + g
        param <- param - lr * buf

    The first step initialises ``buf`` to ``g``.  ``key`` names the momentum
    buffer and defaults to ``param.name``.
    """
    if param.grad is None:
        raise ValueError(f"sgd_step: parameter {param.name or '<unnamed>'} has no gradient")
    key = key if key is not None else param.name
    if key is None:
        raise ValueError("sgd_step: unnamed parameter needs an explicit key")
    dt = param.data.dtype.type
    g = param.grad
    if state.weight_decay:
        g = g + dt(state.weight_decay) * param.data
    buf = state.buffers.get(key)
    if buf is None:
        buf = g.astype(param.data.dtype, copy=True)
    else:
        if buf.shape != param.shape:
            raise ValueError(f"sgd_step: momentum buffer for {key} has shape {buf.shape}, "
                             f"parameter has {param.shape}")
        buf = dt(state.momentum) * buf + g
    state.buffers[key] = buf
    param.data = param.data - dt(state.lr) * buf
    return param


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
