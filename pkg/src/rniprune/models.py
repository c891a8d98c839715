"""VGG-16 and ResNet-56 (CIFAR variants) as explicit layer graphs.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` nodes plus the
parameter tensors and norm states they reference.  Every conv carries the id
of the norm layer that follows it and, when prunable, the ids of the layers
whose input width depends on its channel count (its *followers*).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .norm import EVAL, SIGMA, TRAIN, VANILLA, NormChannelState
from .tensor import Tensor

VGG16 = "vgg16"
RESNET56 = "resnet56"

VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
RESNET_STAGE_WIDTHS = (16, 32, 64)
RESNET_BLOCKS_PER_STAGE = 9
MIN_WIDTH = 4

LAYER_KINDS = ("conv", "norm", "relu", "pool", "linear", "add-skip", "global-pool")


@dataclass
class LayerSpec:
    id: str
    kind: str
    out_channels: int
    prunable: bool = False
    follower_ids: Tuple[str, ...] = ()
    inputs: Tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.out_channels < 1:
            raise ValueError(f"layer {self.id}: out_channels must be >= 1")


class ModelGraph:
    """Ordered layer specs plus the tensors they own."""

    def __init__(self, layers: List[LayerSpec], params: Dict[str, Tensor],
                 norm_states: Dict[str, NormChannelState], arch_tag: str,
                 width_scale: float, norm_kind: str, num_classes: int):
        self.layers = layers
        self.params = params
        self.norm_states = norm_states
        self.arch_tag = arch_tag
        self.width_scale = width_scale
        self.norm_kind = norm_kind
        self.num_classes = num_classes
        self._index = {spec.id: i for i, spec in enumerate(layers)}

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self._index[layer_id]]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._index

    def reindex(self) -> None:
        self._index = {spec.id: i for i, spec in enumerate(self.layers)}

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    def forward(self, x, mode: str = TRAIN) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        outs: Dict[str, Tensor] = {}
        prev = x
        for spec in self.layers:
            args = [outs[i] for i in spec.inputs] if spec.inputs else [prev]
            prev = self._apply(spec, args, mode)
            outs[spec.id] = prev
        return prev

    __call__ = forward

    def _apply(self, spec: LayerSpec, args: List[Tensor], mode: str) -> Tensor:
        kind = spec.kind
        if kind == "conv":
            a = spec.attrs
            return T.conv2d(args[0], self.params[f"{spec.id}.weight"], None,
                            stride=a["stride"], pad=a["pad"])
        if kind == "norm":
            return self.norm_states[spec.id].forward(args[0], mode)
        if kind == "relu":
            return T.relu(args[0])
        if kind == "pool":
            return T.maxpool2d(args[0], spec.attrs.get("k", 2))
        if kind == "global-pool":
            return T.avgpool2d(args[0], None)
        if kind == "add-skip":
            return T.add(args[0], args[1])
        if kind == "linear":
            return T.linear(T.flatten(args[0]), self.params[f"{spec.id}.weight"],
                            self.params[f"{spec.id}.bias"])
        raise ValueError(f"cannot execute layer kind {kind!r}")

    # ------------------------------------------------------------------
    def trainable(self) -> List[Tuple[str, Tensor]]:
        """(name, tensor) pairs of every learnable tensor, in layer order."""
        named = []
        for spec in self.layers:
            if spec.kind in ("conv", "linear"):
                for suffix in ("weight", "bias"):
                    name = f"{spec.id}.{suffix}"
                    if name in self.params:
                        named.append((name, self.params[name]))
            elif spec.kind == "norm":
                st = self.norm_states[spec.id]
                named.append((f"{spec.id}.gamma", st.gamma))
                if st.beta is not None:
                    named.append((f"{spec.id}.beta", st.beta))
        return named

    def num_params(self) -> int:
        return int(sum(t.data.size for _, t in self.trainable()))

    def conv_ids(self) -> List[str]:
        return [s.id for s in self.layers if s.kind == "conv"]

    def prunable_ids(self) -> List[str]:
        return [s.id for s in self.layers if s.kind == "conv" and s.prunable]

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Every persistent array (parameters and running statistics) by name."""
        out = {name: t.data for name, t in self.trainable()}
        for lid, st in self.norm_states.items():
            out[f"{lid}.running_mean"] = st.running_mean
            out[f"{lid}.running_var"] = st.running_var
        return out

    def shapes(self, input_hw: int = 32) -> Dict[str, Tuple[int, int, int]]:
        """Static (C, H, W) of every layer output for a square input."""
        out: Dict[str, Tuple[int, int, int]] = {}
        prev = (3, input_hw, input_hw)
        for spec in self.layers:
            src = [out[i] for i in spec.inputs] if spec.inputs else [prev]
            c, h, w = src[0]
            if spec.kind == "conv":
                a = spec.attrs
                ho = T.conv_out_size(h, a["k"], a["stride"], a["pad"])
                wo = T.conv_out_size(w, a["k"], a["stride"], a["pad"])
                prev = (spec.out_channels, ho, wo)
            elif spec.kind == "pool":
                k = spec.attrs.get("k", 2)
                prev = (c, h // k, w // k)
            elif spec.kind == "global-pool":
                prev = (c, 1, 1)
            elif spec.kind == "linear":
                prev = (spec.out_channels, 1, 1)
            else:
                prev = (c, h, w)
            out[spec.id] = prev
        return out


def scaled_width(base: int, width_scale: float) -> int:
    """round-half-up(base·scale), floored at :data:`MIN_WIDTH`."""
    return max(MIN_WIDTH, int(np.floor(base * width_scale + 0.5)))


def _check_args(num_classes: int, norm_kind: str, width_scale: float) -> None:
    if not 0 < width_scale <= 1:
        raise ValueError(f"width_scale must lie in (0, 1], got {width_scale}")
    if norm_kind not in (VANILLA, SIGMA):
        raise ValueError(f"unknown norm kind {norm_kind!r}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")


def _conv_weight(rng, cout, cin, k) -> Tensor:
    std = np.sqrt(2.0 / (cout * k * k))  # Kaiming normal, fan-out
    return Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32),
                  requires_grad=True)


def _add_conv(layers, params, norms, rng, lid, nid, cin, cout, k, stride, pad, norm_kind,
              prunable=False, inputs=()):
    params[f"{lid}.weight"] = _conv_weight(rng, cout, cin, k)
    layers.append(LayerSpec(lid, "conv", cout, prunable=prunable, inputs=tuple(inputs),
                            attrs={"k": k, "stride": stride, "pad": pad, "in_channels": cin,
                                   "norm": nid}))
    norms[nid] = NormChannelState.create(norm_kind, cout, rng)
    layers.append(LayerSpec(nid, "norm", cout))


def _add_linear(layers, params, rng, lid, fin, fout, per_channel=1):
    w = (rng.standard_normal((fout, fin)) * 0.01).astype(np.float32)
    params[f"{lid}.weight"] = Tensor(w, requires_grad=True)
    params[f"{lid}.bias"] = Tensor(np.zeros(fout, dtype=np.float32), requires_grad=True)
    layers.append(LayerSpec(lid, "linear", fout,
                            attrs={"in_features": fin, "features_per_channel": per_channel}))


def _name_params(model: ModelGraph) -> ModelGraph:
    for name, t in model.trainable():
        t.name = name
    return model


def build_vgg16(num_classes: int = 10, norm_kind: str = SIGMA, width_scale: float = 1.0,
                seed: int = 0) -> ModelGraph:
    """13 conv-norm-relu layers in five width groups, a max-pool closing each
    group, then one linear classifier on the 1×1 map.  All convs are prunable."""
    _check_args(num_classes, norm_kind, width_scale)
    rng = np.random.default_rng(seed)
    layers: List[LayerSpec] = []
    params: Dict[str, Tensor] = {}
    norms: Dict[str, NormChannelState] = {}
    cin, i, p = 3, 0, 0
    for item in VGG16_CFG:
        if item == "M":
            p += 1
            layers.append(LayerSpec(f"pool{p}", "pool", cin, attrs={"k": 2}))
            continue
        i += 1
        cout = scaled_width(item, width_scale)
        _add_conv(layers, params, norms, rng, f"conv{i}", f"bn{i}", cin, cout, 3, 1, 1,
                  norm_kind, prunable=True)
        layers.append(LayerSpec(f"relu{i}", "relu", cout))
        cin = cout
    _add_linear(layers, params, rng, "fc", cin, num_classes)

    conv_ids = [s.id for s in layers if s.kind == "conv"]
    for a, b in zip(conv_ids, conv_ids[1:] + ["fc"]):
        layers[[s.id for s in layers].index(a)].follower_ids = (b,)
    return _name_params(ModelGraph(layers, params, norms, VGG16, width_scale, norm_kind, num_classes))


def build_resnet56(num_classes: int = 10, norm_kind: str = SIGMA, width_scale: float = 1.0,
                   seed: int = 0) -> ModelGraph:
    """CIFAR ResNet-56: stem conv, 3 stages of 9 basic blocks, global pool, linear.

    Only the first conv of each block is prunable (its sole follower is the
    block's second conv).  Second convs, the stem and the 1×1 stride-2
    projection shortcuts feed residual sums and stay fixed.
    """
    _check_args(num_classes, norm_kind, width_scale)
    rng = np.random.default_rng(seed)
    layers: List[LayerSpec] = []
    params: Dict[str, Tensor] = {}
    norms: Dict[str, NormChannelState] = {}
    widths = [scaled_width(w, width_scale) for w in RESNET_STAGE_WIDTHS]

    _add_conv(layers, params, norms, rng, "stem.conv", "stem.bn", 3, widths[0], 3, 1, 1, norm_kind)
    layers.append(LayerSpec("stem.relu", "relu", widths[0]))
    cur, cin = "stem.relu", widths[0]
    for s, width in enumerate(widths, start=1):
        for b in range(1, RESNET_BLOCKS_PER_STAGE + 1):
            pre = f"s{s}.b{b}"
            stride = 2 if (b == 1 and s > 1) else 1
            _add_conv(layers, params, norms, rng, f"{pre}.conv1", f"{pre}.bn1", cin, width, 3,
                      stride, 1, norm_kind, prunable=True, inputs=(cur,))
            layers[-2].follower_ids = (f"{pre}.conv2",)
            layers.append(LayerSpec(f"{pre}.relu1", "relu", width))
            _add_conv(layers, params, norms, rng, f"{pre}.conv2", f"{pre}.bn2", width, width, 3,
                      1, 1, norm_kind)
            skip = cur
            if stride != 1 or cin != width:
                _add_conv(layers, params, norms, rng, f"{pre}.down.conv", f"{pre}.down.bn", cin,
                          width, 1, stride, 0, norm_kind, inputs=(cur,))
                skip = f"{pre}.down.bn"
            layers.append(LayerSpec(f"{pre}.add", "add-skip", width, inputs=(f"{pre}.bn2", skip)))
            layers.append(LayerSpec(f"{pre}.relu2", "relu", width))
            cur, cin = f"{pre}.relu2", width
    layers.append(LayerSpec("pool", "global-pool", cin))
    _add_linear(layers, params, rng, "fc", cin, num_classes)
    return _name_params(ModelGraph(layers, params, norms, RESNET56, width_scale, norm_kind, num_classes))


def build_model(arch: str, num_classes: int, norm_kind: str, width_scale: float,
                seed: int = 0) -> ModelGraph:
    builders = {VGG16: build_vgg16, RESNET56: build_resnet56}
    if arch not in builders:
        raise ValueError(f"unknown architecture {arch!r}")
    return builders[arch](num_classes, norm_kind, width_scale, seed)


def prunable_channels(model: ModelGraph) -> List[Tuple[str, int]]:
    """(layer id, channel) for every channel of every prunable conv, in layer order."""
    return [(s.id, c) for s in model.layers if s.kind == "conv" and s.prunable
            for c in range(s.out_channels)]


def skip_path_layers(model: ModelGraph) -> set:
    """Ids of convs whose output reaches an add-skip without passing through
    another conv: exactly the convs that must never be pruned."""
    producers: Dict[str, List[str]] = {}
    prev = None
    for spec in model.layers:
        producers[spec.id] = list(spec.inputs) if spec.inputs else ([prev] if prev else [])
        prev = spec.id
    found = set()
    for spec in model.layers:
        if spec.kind != "add-skip":
            continue
        stack, seen = list(producers[spec.id]), set()
        while stack:
            lid = stack.pop()
            if lid in seen:
                continue
            seen.add(lid)
            if model.layer(lid).kind == "conv":
                found.add(lid)
            else:
                stack.extend(producers[lid])
    return found
