"""Central-difference gradient checking for scalar functions of tensors."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    pass


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor],
                      eps: float = 1e-3, max_coords: Optional[int] = 64,
                      seed: int = 0) -> float:
    """Max relative error between autodiff and central differences.

    For each sampled coordinate ``x_i`` of each input::

        err_i = |a_i - n_i| / max(1e-8, |a_i| + |n_i|)

    where ``a_i`` is the backpropagated gradient and
    ``n_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``.
    At most ``max_coords`` coordinates per input are drawn (all if None).
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    out = f(inputs)
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite function value at the base point")
    out.backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords \
            else rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(inputs).data)
            flat[i] = orig - eps
            fm = float(f(inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite value while perturbing coordinate {i}")
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
