"""Sparsity penalties on norm-layer scales and the training objective.

RNI penalises each channel by ``s·(1 - ln s)`` with ``s = sigmoid(γ + b)``.
Its derivative with respect to ``s`` is ``-ln s``, so the push towards zero
fades exponentially once ``γ + b`` is large, leaving important channels alone.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .norm import NormChannelState
from .tensor import Tensor, _result, add

RNI = "rni"
L1 = "l1"
NONE = "none"

LOG_CLAMP = 1e-12
_MAX_NEG_LOG = -np.log(LOG_CLAMP)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid64(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _rni_terms(z: np.ndarray):
    """Per-channel penalty and d/dγ at ``z = γ + b`` in float64.

    ``-ln s`` is evaluated as softplus(-z) and ``1 - s`` as sigmoid(-z) so
    neither saturated tail loses precision.  Clamping ``s >= 1e-12`` caps
    ``-ln s`` at ``-ln 1e-12``.
    """
    z = np.asarray(z, dtype=np.float64)
    s = _sigmoid64(z)
    neg_log = _softplus(-z)
    clamped = neg_log > _MAX_NEG_LOG
    neg_log = np.minimum(neg_log, _MAX_NEG_LOG)
    s_c = np.maximum(s, LOG_CLAMP)
    value = s_c * (1.0 + neg_log)
    # inside the clamp the term is constant in s, so its derivative vanishes
    grad = np.where(clamped, 0.0, neg_log * s * _sigmoid64(-z))
    return value, grad


def rni_penalty(gammas, b: float = 0.0) -> float:
    """Sum over channels of ``s·(1 - ln s)``, ``s = sigmoid(γ + b)``."""
    z = np.asarray(gammas, dtype=np.float64) + b
    value, _ = _rni_terms(z)
    return float(value.sum())


def rni_gradient(gamma, b: float = 0.0):
    """d/dγ of one RNI term: ``-ln(s)·s·(1-s)``; non-negative everywhere."""
    _, grad = _rni_terms(np.asarray(gamma, dtype=np.float64) + b)
    return float(grad) if grad.ndim == 0 else grad


def l1_penalty(gammas) -> float:
    return float(np.abs(np.asarray(gammas, dtype=np.float64)).sum())


def l1_gradient(gamma):
    """sign(γ), with 0 at γ = 0."""
    g = np.sign(np.asarray(gamma, dtype=np.float64))
    return float(g) if g.ndim == 0 else g


def rni_loss(gamma: Tensor, b: float) -> Tensor:
    value, grad = _rni_terms(gamma.data.astype(np.float64) + b)
    out = np.asarray(value.sum(), dtype=gamma.dtype)
    return _result(out, (gamma,), lambda g: ((g * grad).astype(gamma.dtype),))


def l1_loss(gamma: Tensor) -> Tensor:
    out = np.asarray(np.abs(gamma.data).sum(dtype=np.float64), dtype=gamma.dtype)
    sign = np.sign(gamma.data)
    return _result(out, (gamma,), lambda g: (g * sign,))


@dataclass
class SparsityConfig:
    """Which penalty to apply, how hard, and to which norm layers.

    ``target_layers=None`` targets every norm layer of the model.
    """
    method: str = NONE
    lambda_s: float = 0.0
    b: float = 0.0
    target_layers: Optional[frozenset] = None

    def __post_init__(self):
        if self.method not in (RNI, L1, NONE):
            raise ValueError(f"unknown sparsity method {self.method!r}")
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be >= 0")
        if (self.lambda_s == 0) != (self.method == NONE):
            raise ValueError("lambda_s must be 0 exactly when method is 'none'")
        if not np.isfinite(self.b):
            raise ValueError("b must be finite")
        if self.target_layers is not None:
            self.target_layers = frozenset(self.target_layers)


def sparsity_loss(sparsity: SparsityConfig, norm_states: Mapping[str, NormChannelState]) -> Optional[Tensor]:
    """``λ_S · Σ_layers penalty(γ)`` as a differentiable scalar, or None."""
    if sparsity.method == NONE:
        return None
    if sparsity.target_layers is None:
        ids: Iterable[str] = norm_states.keys()
    else:
        missing = sorted(set(sparsity.target_layers) - set(norm_states))
        if missing:
            raise KeyError(f"sparsity target layers not in model: {missing}")
        ids = [k for k in norm_states if k in sparsity.target_layers]
    total = None
    for layer_id in ids:
        gamma = norm_states[layer_id].gamma
        term = rni_loss(gamma, sparsity.b) if sparsity.method == RNI else l1_loss(gamma)
        total = term if total is None else add(total, term)
    if total is None:
        return None
    lam = sparsity.lambda_s
    out = np.asarray(total.data * lam, dtype=total.dtype)
    return _result(out, (total,), lambda g: (g * g.dtype.type(lam),))


def total_objective(ce_loss: Tensor, sparsity: SparsityConfig,
                    norm_states: Mapping[str, NormChannelState]) -> Tensor:
    """Data loss plus ``λ_S·R_S``.

    The weight-decay term is applied by the optimiser and is deliberately not
    part of the returned scalar.
    """
    reg = sparsity_loss(sparsity, norm_states)
    if reg is None:
        return ce_loss
    return add(ce_loss, reg)
