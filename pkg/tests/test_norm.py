import numpy as np
import pytest
from hypothesis import given, strategies as st

from rniprune.gradcheck import finite_diff_check
from rniprune.norm import (EVAL, SIGMA, TRAIN, VANILLA, NormChannelState, bn_forward,
                           channel_importance, sigma_bn_forward, sigmoid)
from rniprune.tensor import Tensor, _result, tensor_sum


def state64(kind, c, rng):
    st_ = NormChannelState.create(kind, c, rng, dtype=np.float64)
    if kind == VANILLA:
        st_.gamma.data = rng.standard_normal(c)
        st_.beta.data = rng.standard_normal(c)
    return st_


def weighted_sum(out, w):
    """Σ w·out, so the check is not blind to per-channel mean shifts."""
    return _result(np.asarray((out.data * w).sum()), (out,), lambda g: (g * w,))


class TestForward:
    def test_sigma_train_statistics(self, rng):
        st_ = state64(SIGMA, 4, rng)
        x = rng.standard_normal((8, 4, 3, 3)) * 3 + 2
        out = sigma_bn_forward(Tensor(x), st_, TRAIN).data
        s = sigmoid(st_.gamma.data)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), s * np.sqrt(var / (var + 1e-5)), rtol=1e-10)

    def test_vanilla_train_statistics(self, rng):
        st_ = state64(VANILLA, 3, rng)
        x = rng.standard_normal((6, 3, 4, 4)) * 2 - 1
        out = bn_forward(Tensor(x), st_, TRAIN).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), st_.beta.data, atol=1e-12)

    def test_running_statistics(self, rng):
        st_ = state64(SIGMA, 2, rng)
        x = rng.standard_normal((4, 2, 2, 2))
        sigma_bn_forward(Tensor(x), st_, TRAIN)
        m = 16
        np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(st_.running_var,
                                   0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))

    def test_eval_uses_running_statistics(self, rng):
        st_ = state64(SIGMA, 3, rng)
        st_.running_mean = np.array([1.0, -1.0, 0.5])
        st_.running_var = np.array([4.0, 0.25, 1.0])
        x = rng.standard_normal((2, 3, 2, 2))
        out = sigma_bn_forward(Tensor(x), st_, EVAL).data
        s = sigmoid(st_.gamma.data)
        ref = s[None, :, None, None] * (x - st_.running_mean[None, :, None, None]) \
            / np.sqrt(st_.running_var[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(out, ref, rtol=1e-12)
        before = st_.running_mean.copy()
        sigma_bn_forward(Tensor(x), st_, EVAL)
        np.testing.assert_array_equal(st_.running_mean, before)

    def test_sigma_bounded_by_normalised_input(self, rng):
        st_ = state64(SIGMA, 3, rng)
        st_.gamma.data = np.array([30.0, 0.0, -30.0])
        x = rng.standard_normal((5, 3, 2, 2)) * 10
        out = sigma_bn_forward(Tensor(x), st_, TRAIN).data
        xhat = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(
            x.var(axis=(0, 2, 3), keepdims=True) + 1e-5)
        assert np.all(np.abs(out) <= np.abs(xhat) + 1e-12)
        assert np.abs(out[:, 2]).max() < 1e-12

    def test_train_needs_two_values(self, rng):
        with pytest.raises(ValueError, match="at least 2"):
            sigma_bn_forward(Tensor(np.zeros((1, 3, 1, 1))), state64(SIGMA, 3, rng), TRAIN)


class TestGradients:
    @pytest.mark.parametrize("kind", [SIGMA, VANILLA])
    @pytest.mark.parametrize("mode", [TRAIN, EVAL])
    def test_finite_differences(self, rng, kind, mode):
        st_ = state64(kind, 3, rng)
        st_.running_var = np.array([0.5, 2.0, 1.0])
        x = Tensor(rng.standard_normal((4, 3, 2, 2)), requires_grad=True)
        w = rng.standard_normal((4, 3, 2, 2))
        params = [x, st_.gamma] + ([st_.beta] if st_.beta is not None else [])

        def f(ts):
            saved = st_.running_mean.copy(), st_.running_var.copy()
            out = weighted_sum(st_.forward(ts[0], mode), w)
            st_.running_mean, st_.running_var = saved
            return out

        assert finite_diff_check(f, params, eps=1e-6) < 1e-6


class TestState:
    def test_sigma_init_standard_normal(self):
        g = NormChannelState.create(SIGMA, 20000, np.random.default_rng(1)).gamma.data
        assert abs(g.mean()) < 0.03 and abs(g.std() - 1) < 0.03

    def test_vanilla_init(self):
        st_ = NormChannelState.create(VANILLA, 4)
        np.testing.assert_array_equal(st_.gamma.data, 0.5)
        np.testing.assert_array_equal(st_.beta.data, 0.0)

    def test_sigma_rejects_offset(self):
        with pytest.raises(ValueError, match="offset"):
            NormChannelState(SIGMA, Tensor(np.zeros(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2))

    def test_importance(self):
        s = NormChannelState.create(SIGMA, 3)
        s.gamma.data = np.array([0.0, 2.0, -2.0], np.float32)
        np.testing.assert_allclose(channel_importance(s), 1 / (1 + np.exp([-0.0, -2.0, 2.0])), rtol=1e-6)
        v = NormChannelState.create(VANILLA, 2)
        v.gamma.data = np.array([-0.3, 0.2], np.float32)
        np.testing.assert_allclose(channel_importance(v), [0.3, 0.2], rtol=1e-6)


class TestSigmoid:
    @given(st.floats(-1e3, 1e3))
    def test_range_and_symmetry(self, z):
        with np.errstate(over="raise", invalid="raise"):
            s, t = sigmoid(np.float64(z)), sigmoid(np.float64(-z))
        assert 0.0 <= s <= 1.0
        assert s + t == pytest.approx(1.0, abs=1e-15)
