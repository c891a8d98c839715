import numpy as np
import pytest

from rniprune.gradcheck import NonFiniteError, finite_diff_check
from rniprune.tensor import Tensor, _result, tensor_sum


def cube(t):
    """x³ with a deliberately wrong derivative when ``broken``."""
    def op(ts, broken=False):
        x = ts[0]
        return _result(np.asarray((x.data ** 3).sum()), (x,),
                       lambda g: (g * (2 if broken else 3) * x.data ** 2,))
    return op


class TestFiniteDiff:
    def test_correct_gradient_passes(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        assert finite_diff_check(cube(x), [x], eps=1e-6) < 1e-8

    def test_wrong_gradient_detected(self, rng):
        x = Tensor(rng.uniform(0.5, 1.0, 5), requires_grad=True)
        err = finite_diff_check(lambda ts: cube(x)(ts, broken=True), [x], eps=1e-6)
        assert err == pytest.approx(0.2, rel=1e-3)    # |2-3|/(2+3)

    def test_nonfinite(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        f = lambda ts: _result(np.asarray(np.log(ts[0].data).sum()), (ts[0],), lambda g: (g / ts[0].data,))
        with pytest.raises(NonFiniteError):
            with np.errstate(divide="ignore"):
                finite_diff_check(f, [x])

    def test_needs_scalar(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ValueError):
            finite_diff_check(lambda ts: ts[0], [x])

    def test_coordinate_sampling_limits_work(self, rng):
        x = Tensor(rng.standard_normal(1000), requires_grad=True)
        calls = []

        def f(ts):
            calls.append(1)
            return tensor_sum(ts[0])

        finite_diff_check(f, [x], max_coords=10)
        assert len(calls) == 1 + 2 * 10
