import numpy as np
import pytest

from rniprune.models import (MIN_WIDTH, build_model, build_resnet56, build_vgg16,
                             prunable_channels, scaled_width, skip_path_layers)
from rniprune.norm import EVAL, SIGMA, VANILLA

VGG_WIDTHS = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]


def vgg_param_count(widths, norm_params_per_channel, classes=10):
    """Closed form: 3×3 conv weights (no bias), norm params, linear head."""
    cins = [3] + widths[:-1]
    conv = sum(9 * a * b for a, b in zip(cins, widths))
    return conv + norm_params_per_channel * sum(widths) + widths[-1] * classes + classes


class TestVGG:
    def test_full_width_parameter_count(self):
        # hand-summed: conv 14,710,464 + σBN 4,224 + fc 5,130
        assert build_vgg16(norm_kind=SIGMA).num_params() == 14_719_818
        assert build_vgg16(norm_kind=VANILLA).num_params() == 14_719_818 + 4_224

    @pytest.mark.parametrize("scale", [0.125, 0.25, 0.5])
    def test_scaled_parameter_count(self, scale):
        widths = [scaled_width(w, scale) for w in VGG_WIDTHS]
        assert build_vgg16(width_scale=scale).num_params() == vgg_param_count(widths, 1)

    def test_structure(self):
        m = build_vgg16(width_scale=0.25)
        assert m.conv_ids() == [f"conv{i}" for i in range(1, 14)]
        assert m.prunable_ids() == m.conv_ids()
        assert m.layer("conv13").follower_ids == ("fc",)
        assert len(prunable_channels(m)) == 1056

    def test_forward_shape(self, tiny_vgg, rng):
        out = tiny_vgg(rng.standard_normal((2, 3, 32, 32)).astype(np.float32), EVAL)
        assert out.shape == (2, 10) and out.dtype == np.float32

    def test_sigma_layers_have_no_offset(self):
        assert all(s.beta is None for s in build_vgg16(width_scale=0.125).norm_states.values())
        assert all(s.beta is not None for s in
                   build_vgg16(width_scale=0.125, norm_kind=VANILLA).norm_states.values())

    def test_seeded_init(self):
        a = build_vgg16(width_scale=0.125, seed=5).state_arrays()
        b = build_vgg16(width_scale=0.125, seed=5).state_arrays()
        c = build_vgg16(width_scale=0.125, seed=6).state_arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["conv1.weight"], c["conv1.weight"])


class TestResNet:
    def test_structure(self):
        m = build_resnet56()
        convs = m.conv_ids()
        assert len(convs) == 1 + 54 + 2
        assert len(m.prunable_ids()) == 27
        assert all(pid.endswith(".conv1") for pid in m.prunable_ids())
        assert len(prunable_channels(m)) == 9 * (16 + 32 + 64)

    def test_no_prunable_conv_on_skip_path(self):
        m = build_resnet56(width_scale=0.25)
        skip = skip_path_layers(m)
        assert "stem.conv" in skip and "s2.b1.down.conv" in skip and "s1.b3.conv2" in skip
        assert skip.isdisjoint(m.prunable_ids())

    def test_residual_sums_well_formed(self):
        m = build_resnet56(width_scale=0.5)
        shapes = m.shapes(32)
        for spec in m.layers:
            if spec.kind == "add-skip":
                a, b = spec.inputs
                assert shapes[a] == shapes[b]
        assert shapes["pool"] == (32, 1, 1)

    def test_small_width_runs(self, rng):
        m = build_resnet56(width_scale=0.125)
        assert min(s.out_channels for s in m.layers if s.kind == "conv") == MIN_WIDTH
        assert m(rng.standard_normal((2, 3, 32, 32)).astype(np.float32), EVAL).shape == (2, 10)


class TestBuilders:
    @pytest.mark.parametrize("base,scale,expected", [(64, 0.25, 16), (16, 0.125, 4), (16, 0.0625, 4),
                                                     (24, 0.0625, 4), (20, 0.125, 4), (44, 0.125, 6)])
    def test_scaled_width(self, base, scale, expected):
        assert scaled_width(base, scale) == expected

    @pytest.mark.parametrize("scale", [0.0, -0.5, 1.5])
    def test_bad_width_scale(self, scale):
        with pytest.raises(ValueError):
            build_vgg16(width_scale=scale)

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            build_model("lenet", 10, SIGMA, 1.0)
