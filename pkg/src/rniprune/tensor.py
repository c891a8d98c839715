"""Dense tensors with tape-based reverse-mode differentiation.

Only the operator set needed by the VGG/ResNet builders is provided.  Every
op preserves the floating dtype of its inputs: models run in float32, while
gradient checks may feed float64 tensors through the same code path.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Dimension mismatch; ``axis`` names the offending axis."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: axis '{axis}' expected {expected}, got {got}")


class Tensor:
    """An n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Intermediate gradients live only for the duration of the call.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


_GRAD_ENABLED = True


class no_grad:
    """Context manager that stops ops from recording the tape."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "shape", a.shape, b.shape)
    out = (a.data + b.data).astype(a.dtype, copy=False)
    return _result(out, (a, b), lambda g: (g.astype(a.dtype, copy=False), g.astype(b.dtype, copy=False)))


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    return _result(out, (a,), lambda g: (g * g.dtype.type(c),))


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0.  NaN propagates."""
    mask = x.data > 0
    out = np.maximum(x.data, x.data.dtype.type(0))
    return _result(out, (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.data.reshape(shape[0], -1)
    return _result(out, (x,), lambda g: (g.reshape(shape),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("linear", "input rank", 2, x.data.ndim)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError("linear", "in_features", weight.shape[1], x.shape[1])
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", "out_features", weight.shape[0], bias.shape)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, backward)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_gemm(x: np.ndarray, wmat: np.ndarray, k: int, stride: int, pad: int,
               ho: int, wo: int):
    """im2col + GEMM on an NCHW array.

    ``wmat`` is laid out (cout, k, k, cin).  Returns the (n·ho·wo, cout)
    output, the im2col matrix and the padded input shape (NCHW).
    """
    n, cin, h, w = x.shape
    xh = np.zeros((n, h + 2 * pad, w + 2 * pad, cin), dtype=x.dtype)
    xh[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, cin), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * cin)
    return cols @ wmat.T, cols, (n, cin, h + 2 * pad, w + 2 * pad)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via im2col and one GEMM."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.data.ndim)
    if weight.data.ndim != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.data.ndim)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError("conv2d", "in_channels", wcin, cin)
    if kh != kw or kh < 1:
        raise ShapeError("conv2d", "kernel", "square k>=1", (kh, kw))
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got {stride}, {pad}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", "bias", (cout,), bias.shape)
    k = kh
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "spatial", f">= {k - 2 * pad}", (h, w))

    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out, cols, xp_shape = _conv_gemm(x.data, wmat, k, stride, pad, ho, wo)
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            if stride == 1 and pad <= k - 1:
                # full correlation of the output gradient with the flipped kernel
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
                gx_mat, _, _ = _conv_gemm(g, wflip, k, 1, k - 1 - pad, h, w)
                gx = gx_mat.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
            else:
                gcols = (gmat @ wmat).reshape(n, ho, wo, k, k, cin)
                gxp = np.zeros(xp_shape, dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            gcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, backward)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling (stride k).  Ties route to the first max."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("maxpool2d", "spatial", f"multiple of {k}", (h, w))
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _result(out, (x,), backward)


def avgpool2d(x: Tensor, k: Optional[int] = None) -> Tensor:
    """k×k average pooling with stride k; ``k=None`` pools globally to 1×1."""
    n, c, h, w = x.shape
    if k is None:
        if h != w:
            raise ShapeError("avgpool2d", "spatial", "square", (h, w))
        k = h
    if h % k or w % k:
        raise ShapeError("avgpool2d", "spatial", f"multiple of {k}", (h, w))
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = x.data.dtype.type(1.0 / (k * k))

    def backward(g):
        gx = np.repeat(np.repeat(g * inv, k, axis=2), k, axis=3)
        return (gx,)

    return _result(out.astype(x.dtype), (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", "logits rank", 2, logits.data.ndim)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", "batch", n, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(n), labels] - logsum
    loss = np.asarray(-logp_true.mean(dtype=np.float64), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _result(loss, (logits,), backward)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
