"""Channel importance, victim selection, structural surgery, cost accounting."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fileio import atomic_write_text
from .models import ModelGraph
from .norm import channel_importance
from .tensor import Tensor

GLOBAL = "global"
UNIFORM = "uniform"
MIN_KEEP = 3

PLAN_MAGIC = "# rniprune prune-plan v1"


class PlanError(ValueError):
    pass


@dataclass
class ImportanceTable:
    entries: List[Tuple[str, int, float]]

    def __len__(self) -> int:
        return len(self.entries)

    def layer_order(self) -> List[str]:
        seen: Dict[str, None] = {}
        for lid, _, _ in self.entries:
            seen.setdefault(lid)
        return list(seen)

    def layer_sizes(self) -> Dict[str, int]:
        sizes: Dict[str, int] = defaultdict(int)
        for lid, _, _ in self.entries:
            sizes[lid] += 1
        return dict(sizes)

    def values(self, layer_id: Optional[str] = None) -> np.ndarray:
        return np.array([imp for lid, _, imp in self.entries
                         if layer_id is None or lid == layer_id], dtype=np.float64)


@dataclass
class PrunePlan:
    """Channels to remove per layer.

    ``widths`` records the width each touched layer had when the plan was
    made; surgery refuses to run against a model whose widths differ.
    """
    victims: Dict[str, Tuple[int, ...]]
    policy: str
    ratio: float
    requested_count: int
    achieved_count: int
    widths: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def empty(cls, policy: str = GLOBAL, ratio: float = 0.0) -> "PrunePlan":
        return cls({}, policy, ratio, 0, 0, {})

    def victim_set(self) -> set:
        return {(lid, c) for lid, chans in self.victims.items() for c in chans}


@dataclass
class CostReport:
    params_total: int
    flops_total: int
    params_rel: float
    flops_rel: float
    input_hw: int = 32


# --------------------------------------------------------------------------
# scoring and selection
# --------------------------------------------------------------------------

def score_model(model: ModelGraph) -> ImportanceTable:
    """One entry per prunable channel: σ(γ) for σBN layers, |γ| for vanilla BN."""
    entries = []
    for spec in model.layers:
        if spec.kind != "conv" or not spec.prunable:
            continue
        nid = spec.attrs.get("norm")
        if nid is None or nid not in model.norm_states:
            raise PlanError(f"prunable conv {spec.id} has no norm layer to score it")
        imp = channel_importance(model.norm_states[nid])
        if imp.shape != (spec.out_channels,):
            raise PlanError(f"norm layer {nid} width does not match conv {spec.id}")
        entries.extend((spec.id, c, float(v)) for c, v in enumerate(imp))
    return ImportanceTable(entries)


def _requested(ratio: float, n: int) -> int:
    # the small slack absorbs binary representation error, e.g. 0.29 * 100
    return int(math.floor(ratio * n + 1e-9))


def _check_ratio(ratio: float) -> None:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"pruning ratio must lie in (0, 1), got {ratio}")


def _plan(victims: Dict[str, List[int]], sizes: Dict[str, int], order: Sequence[str],
          policy: str, ratio: float, requested: int) -> PrunePlan:
    vict = {lid: tuple(sorted(victims[lid])) for lid in order if victims.get(lid)}
    achieved = sum(len(v) for v in vict.values())
    return PrunePlan(vict, policy, ratio, requested, achieved, {lid: sizes[lid] for lid in vict})


def select_global(table: ImportanceTable, ratio: float, min_keep: int = MIN_KEEP) -> PrunePlan:
    """Network-wide ranking: take the least important channels first, skipping
    any whose removal would leave its layer with fewer than ``min_keep``.

    Ties are broken by layer order, then channel index.  The plan may fall
    short of ``floor(ratio·N)`` when the guard blocks the remaining picks.
    """
    _check_ratio(ratio)
    order = table.layer_order()
    rank = {lid: i for i, lid in enumerate(order)}
    sizes = table.layer_sizes()
    requested = _requested(ratio, len(table))
    survivors = dict(sizes)
    victims: Dict[str, List[int]] = defaultdict(list)
    taken = 0
    for lid, c, _ in sorted(table.entries, key=lambda e: (e[2], rank[e[0]], e[1])):
        if taken >= requested:
            break
        if survivors[lid] - 1 < min_keep:
            continue
        survivors[lid] -= 1
        victims[lid].append(c)
        taken += 1
    return _plan(victims, sizes, order, GLOBAL, ratio, requested)


def select_uniform(table: ImportanceTable, ratio: float, min_keep: int = MIN_KEEP) -> PrunePlan:
    """Per-layer pruning of ``floor(ratio·width)`` least important channels,
    capped so every layer keeps ``min_keep``."""
    _check_ratio(ratio)
    order = table.layer_order()
    sizes = table.layer_sizes()
    by_layer: Dict[str, List[Tuple[float, int]]] = defaultdict(list)
    for lid, c, imp in table.entries:
        by_layer[lid].append((imp, c))
    victims: Dict[str, List[int]] = {}
    requested = 0
    for lid in order:
        want = _requested(ratio, sizes[lid])
        requested += want
        k = max(0, min(want, sizes[lid] - min_keep))
        victims[lid] = [c for _, c in sorted(by_layer[lid])[:k]]
    return _plan(victims, sizes, order, UNIFORM, ratio, requested)


def select(table: ImportanceTable, ratio: float, policy: str, min_keep: int = MIN_KEEP) -> PrunePlan:
    if policy == GLOBAL:
        return select_global(table, ratio, min_keep)
    if policy == UNIFORM:
        return select_uniform(table, ratio, min_keep)
    raise ValueError(f"unknown pruning policy {policy!r}")


# --------------------------------------------------------------------------
# surgery
# --------------------------------------------------------------------------

def _take(t: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(np.take(t.data, idx, axis=axis)),
                 requires_grad=t.requires_grad, name=t.name)
    return out


def _validate(model: ModelGraph, plan: PrunePlan) -> None:
    for lid, chans in plan.victims.items():
        if lid not in model:
            raise PlanError(f"plan references unknown layer {lid}")
        spec = model.layer(lid)
        if spec.kind != "conv" or not spec.prunable:
            raise PlanError(f"plan references non-prunable layer {lid}")
        width = plan.widths.get(lid)
        if width is not None and width != spec.out_channels:
            raise PlanError(f"plan was made for {lid} with {width} channels, "
                            f"model has {spec.out_channels}")
        if len(set(chans)) != len(chans):
            raise PlanError(f"duplicate victims in layer {lid}")
        if any(c < 0 or c >= spec.out_channels for c in chans):
            raise PlanError(f"victim channel out of range in layer {lid}")
        if len(chans) >= spec.out_channels:
            raise PlanError(f"plan removes every channel of layer {lid}")
        for fid in spec.follower_ids:
            if model.layer(fid).kind not in ("conv", "linear"):
                raise PlanError(f"no input mapping for follower {fid} of kind "
                                f"{model.layer(fid).kind}")


def apply_surgery(model: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """Return a physically smaller copy of ``model`` with the victims removed.

    Removing channel c of conv L deletes L's output slice c, channel c of its
    norm state, and the matching input slice of each follower (a conv's input
    channel or a linear layer's block of ``features_per_channel`` inputs).
    """
    _validate(model, plan)
    new = model.copy()
    for lid, chans in plan.victims.items():
        if not chans:
            continue
        spec = new.layer(lid)
        keep = np.setdiff1d(np.arange(spec.out_channels), np.asarray(chans, dtype=np.int64))
        wname = f"{lid}.weight"
        new.params[wname] = _take(new.params[wname], keep, 0)
        nid = spec.attrs["norm"]
        st = new.norm_states[nid]
        st.gamma = _take(st.gamma, keep, 0)
        if st.beta is not None:
            st.beta = _take(st.beta, keep, 0)
        st.running_mean = st.running_mean[keep].copy()
        st.running_var = st.running_var[keep].copy()
        spec.out_channels = len(keep)
        for fid in spec.follower_ids:
            follower = new.layer(fid)
            fname = f"{fid}.weight"
            if follower.kind == "conv":
                new.params[fname] = _take(new.params[fname], keep, 1)
                follower.attrs["in_channels"] = len(keep)
            else:
                per = follower.attrs.get("features_per_channel", 1)
                feats = (keep[:, None] * per + np.arange(per)[None, :]).reshape(-1)
                new.params[fname] = _take(new.params[fname], feats, 1)
                follower.attrs["in_features"] = len(feats)
    _propagate_widths(new)
    return new


def _propagate_widths(model: ModelGraph) -> None:
    prev = None
    widths: Dict[str, int] = {}
    for spec in model.layers:
        src = [widths[i] for i in spec.inputs] if spec.inputs else ([widths[prev]] if prev else [3])
        if spec.kind not in ("conv", "linear"):
            spec.out_channels = src[0]
        widths[spec.id] = spec.out_channels
        prev = spec.id


# --------------------------------------------------------------------------
# accounting
# --------------------------------------------------------------------------

def layer_macs(model: ModelGraph, input_hw: int = 32) -> Dict[str, int]:
    """Multiply-accumulates of every conv and linear layer.

    conv: k²·Cin·Cout·Hout·Wout; linear: in·out.  Norm, ReLU, pooling and
    residual adds count as zero.
    """
    shapes = model.shapes(input_hw)
    out = {}
    for spec in model.layers:
        if spec.kind == "conv":
            w = model.params[f"{spec.id}.weight"].shape
            _, ho, wo = shapes[spec.id]
            out[spec.id] = int(w[0] * w[1] * w[2] * w[3] * ho * wo)
        elif spec.kind == "linear":
            w = model.params[f"{spec.id}.weight"].shape
            out[spec.id] = int(w[0] * w[1])
    return out


def cost_report(model: ModelGraph, reference: ModelGraph, input_hw: int = 32) -> CostReport:
    if model.arch_tag != reference.arch_tag:
        raise ValueError(f"cannot compare {model.arch_tag} against {reference.arch_tag}")
    flops = sum(layer_macs(model, input_hw).values())
    ref_flops = sum(layer_macs(reference, input_hw).values())
    params = model.num_params()
    ref_params = reference.num_params()
    return CostReport(params, flops, params / ref_params, flops / ref_flops, input_hw)


def layer_prune_map(plan: PrunePlan, model: ModelGraph) -> List[Tuple[str, float]]:
    """(layer id, fraction of its filters removed) for every prunable layer."""
    out = []
    for spec in model.layers:
        if spec.kind == "conv" and spec.prunable:
            out.append((spec.id, len(plan.victims.get(spec.id, ())) / spec.out_channels))
    return out


# --------------------------------------------------------------------------
# plan files
# --------------------------------------------------------------------------

def write_plan(plan: PrunePlan, path, extra_header: Optional[Dict[str, str]] = None) -> None:
    lines = [PLAN_MAGIC]
    header = {"policy": plan.policy, "ratio": repr(float(plan.ratio)),
              "requested_count": str(plan.requested_count),
              "achieved_count": str(plan.achieved_count)}
    header.update(extra_header or {})
    lines += [f"# {k}={v}" for k, v in header.items()]
    for lid, width in plan.widths.items():
        lines.append(f"# width {lid}={width}")
    lines.append("layer_id,channel")
    for lid, chans in plan.victims.items():
        lines += [f"{lid},{c}" for c in chans]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_plan(path) -> PrunePlan:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != PLAN_MAGIC:
        raise PlanError(f"{path}: not a prune plan file")
    header: Dict[str, str] = {}
    widths: Dict[str, int] = {}
    victims: Dict[str, List[int]] = {}
    body = False
    for line in text[1:]:
        if not line:
            continue
        if line.startswith("# width "):
            lid, w = line[len("# width "):].rsplit("=", 1)
            widths[lid] = int(w)
        elif line.startswith("# "):
            k, v = line[2:].split("=", 1)
            header[k] = v
        elif line == "layer_id,channel":
            body = True
        elif body:
            lid, c = line.rsplit(",", 1)
            victims.setdefault(lid, []).append(int(c))
    plan = PrunePlan({k: tuple(v) for k, v in victims.items()}, header["policy"],
                     float(header["ratio"]), int(header["requested_count"]),
                     int(header["achieved_count"]), widths)
    if plan.achieved_count != sum(len(v) for v in plan.victims.values()):
        raise PlanError(f"{path}: achieved_count does not match the victim records")
    return plan

