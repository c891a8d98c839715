"""BatchNorm and the bounded-scale sigmoid BatchNorm (σBN).

Vanilla BN computes ``γ·x̂ + β``; σBN drops the offset and bounds the scale,
computing ``sigmoid(γ)·x̂``.  Both share normalisation and running statistics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, _result

VANILLA = "vanilla"
SIGMA = "sigma"
TRAIN = "train"
EVAL = "eval"


def sigmoid(z):
    """Overflow-free logistic function, dtype-preserving for float arrays."""
    z = np.asarray(z)
    if z.dtype not in (np.float32, np.float64):
        z = z.astype(np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


@dataclass
class NormChannelState:
    kind: str
    gamma: Tensor
    beta: Optional[Tensor]
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    stats_momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in (VANILLA, SIGMA):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind == SIGMA and self.beta is not None:
            raise ValueError("sigma norm layers carry no offset")
        if self.kind == VANILLA and self.beta is None:
            raise ValueError("vanilla norm layers need an offset")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        c = self.channels
        for name in ("running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError("NormChannelState", name, (c,), getattr(self, name).shape)
        if self.beta is not None and self.beta.shape != (c,):
            raise ShapeError("NormChannelState", "beta", (c,), self.beta.shape)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def create(cls, kind: str, channels: int, rng: Optional[np.random.Generator] = None,
               dtype=np.float32, **kw) -> "NormChannelState":
        """Fresh state: σBN γ ~ N(0, 1); vanilla γ = 0.5, β = 0."""
        if kind == SIGMA:
            rng = rng if rng is not None else np.random.default_rng()
            gamma = rng.standard_normal(channels).astype(dtype)
            beta = None
        else:
            gamma = np.full(channels, 0.5, dtype=dtype)
            beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        return cls(kind, Tensor(gamma, requires_grad=True), beta,
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kw)

    def scale(self) -> np.ndarray:
        return sigmoid(self.gamma.data) if self.kind == SIGMA else self.gamma.data

    def forward(self, x: Tensor, mode: str = TRAIN) -> Tensor:
        if self.kind == SIGMA:
            return sigma_bn_forward(x, self, mode)
        return bn_forward(x, self, mode)


def _normalise(x: Tensor, state: NormChannelState, mode: str, scale: np.ndarray,
               dscale_dgamma) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("batch_norm", "input rank", 4, x.data.ndim)
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError("batch_norm", "channels", state.channels, c)
    dt = x.data.dtype
    m = n * h * w
    if mode == TRAIN:
        if m < 2:
            raise ValueError("batch_norm: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)  # biased
        mom = state.stats_momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var * m / (m - 1)).astype(state.running_var.dtype)
    elif mode == EVAL:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + state.eps)).astype(dt)
    xhat = (x.data - mean.astype(dt)[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * scale.astype(dt)[None, :, None, None]
    beta = state.beta
    if beta is not None:
        out = out + beta.data.astype(dt)[None, :, None, None]
    gamma = state.gamma

    def backward(g):
        dscale = (g * xhat).sum(axis=(0, 2, 3))
        dgamma = dscale_dgamma(dscale).astype(gamma.data.dtype)
        dbeta = g.sum(axis=(0, 2, 3)).astype(beta.data.dtype) if beta is not None else None
        gx = None
        if x.requires_grad:
            dxhat = g * scale.astype(dt)[None, :, None, None]
            if mode == TRAIN:
                s1 = dxhat.mean(axis=(0, 2, 3))
                s2 = (dxhat * xhat).mean(axis=(0, 2, 3))
                gx = (dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None]) \
                    * inv[None, :, None, None]
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, dgamma, dbeta

    parents = (x, gamma) + ((beta,) if beta is not None else ())
    return _result(out, parents, backward)


def bn_forward(x: Tensor, state: NormChannelState, mode: str = TRAIN) -> Tensor:
    """Vanilla BatchNorm ``γ·(x-μ)/sqrt(σ²+ε) + β`` per channel.

    Train mode normalises with biased batch statistics and updates the
    running estimates (running_var stores the unbiased estimate); eval mode
    reads the running estimates only.
    """
    if state.kind != VANILLA:
        raise ValueError("bn_forward needs a vanilla norm state")
    return _normalise(x, state, mode, state.gamma.data, lambda d: d)


def sigma_bn_forward(x: Tensor, state: NormChannelState, mode: str = TRAIN) -> Tensor:
    """σBN: ``sigmoid(γ)·(x-μ)/sqrt(σ²+ε)`` per channel, no offset."""
    if state.kind != SIGMA:
        raise ValueError("sigma_bn_forward needs a sigma norm state")
    s = sigmoid(state.gamma.data)
    return _normalise(x, state, mode, s, lambda d: d * s * (1 - s))


def channel_importance(state: NormChannelState) -> np.ndarray:
    """σ(γ) for σBN layers, |γ| for vanilla ones."""
    g = state.gamma.data.astype(np.float64)
    if state.kind == SIGMA:
        return sigmoid(g)
    return np.abs(g)
