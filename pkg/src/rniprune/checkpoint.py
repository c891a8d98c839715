"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"RNIPCKPT"
    version    u16
    header     u32 length + UTF-8 JSON (sorted keys): arch, width_scale,
               norm_kind, num_classes, epoch, config_digest, layer specs,
               per-layer norm constants, free-form ``meta``
    count      u32
    tensors    count × (u16 name length, name, u8 rank, rank × u32 extents,
               float32 data)
    digest     32 bytes  SHA-256 of everything above

Model tensors are stored under their parameter names (plus
``<norm>.running_mean`` / ``<norm>.running_var``); momentum buffers under
``optim/<parameter name>``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .fileio import atomic_write_bytes
from .models import LayerSpec, ModelGraph
from .norm import NormChannelState
from .tensor import Tensor

MAGIC = b"RNIPCKPT"
VERSION = 1
_OPTIM_PREFIX = "optim/"


class CheckpointError(Exception):
    code = "checkpoint"


class CheckpointFormatError(CheckpointError):
    code = "format"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointDigestError(CheckpointError):
    code = "digest"


@dataclass
class Checkpoint:
    model: ModelGraph
    optim_buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    config_digest: str = ""
    meta: dict = field(default_factory=dict)


def _layer_to_json(spec: LayerSpec) -> dict:
    d = asdict(spec)
    d["follower_ids"] = list(spec.follower_ids)
    d["inputs"] = list(spec.inputs)
    return d


def _layer_from_json(d: dict) -> LayerSpec:
    return LayerSpec(d["id"], d["kind"], int(d["out_channels"]), bool(d["prunable"]),
                     tuple(d["follower_ids"]), tuple(d["inputs"]), dict(d["attrs"]))


def encode(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    header = {
        "arch": model.arch_tag,
        "width_scale": model.width_scale,
        "norm_kind": model.norm_kind,
        "num_classes": model.num_classes,
        "epoch": ckpt.epoch,
        "config_digest": ckpt.config_digest,
        "layers": [_layer_to_json(s) for s in model.layers],
        "norms": {lid: {"kind": st.kind, "eps": st.eps, "stats_momentum": st.stats_momentum}
                  for lid, st in model.norm_states.items()},
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = dict(model.state_arrays())
    for name in sorted(ckpt.optim_buffers):
        tensors[_OPTIM_PREFIX + name] = ckpt.optim_buffers[name]
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(hbytes)), hbytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError("checkpoint ends prematurely")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) + 2:
        raise CheckpointTruncatedError("checkpoint shorter than its preamble")
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic bytes: not an rniprune checkpoint")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    (count,) = r.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    body_end = r.pos
    digest = r.take(32)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after digest")
    if hashlib.sha256(buf[:body_end]).digest() != digest:
        raise CheckpointDigestError("checkpoint digest mismatch: file is corrupted")
    return _assemble(header, tensors)


def _assemble(header: dict, tensors: Dict[str, np.ndarray]) -> Checkpoint:
    layers = [_layer_from_json(d) for d in header["layers"]]
    params: Dict[str, Tensor] = {}
    norms: Dict[str, NormChannelState] = {}
    for spec in layers:
        if spec.kind in ("conv", "linear"):
            for suffix in ("weight", "bias"):
                name = f"{spec.id}.{suffix}"
                if name in tensors:
                    params[name] = Tensor(tensors[name], requires_grad=True, name=name)
        elif spec.kind == "norm":
            nh = header["norms"][spec.id]
            gamma = Tensor(tensors[f"{spec.id}.gamma"], requires_grad=True, name=f"{spec.id}.gamma")
            beta_arr = tensors.get(f"{spec.id}.beta")
            beta = None if beta_arr is None else Tensor(beta_arr, requires_grad=True,
                                                        name=f"{spec.id}.beta")
            norms[spec.id] = NormChannelState(nh["kind"], gamma, beta,
                                              tensors[f"{spec.id}.running_mean"],
                                              tensors[f"{spec.id}.running_var"],
                                              eps=nh["eps"], stats_momentum=nh["stats_momentum"])
    model = ModelGraph(layers, params, norms, header["arch"], header["width_scale"],
                       header["norm_kind"], header["num_classes"])
    optim = {k[len(_OPTIM_PREFIX):]: v for k, v in tensors.items() if k.startswith(_OPTIM_PREFIX)}
    return Checkpoint(model, optim, header["epoch"], header["config_digest"], header["meta"])


def save_checkpoint(path, model: ModelGraph, optim_buffers: Optional[Dict[str, np.ndarray]] = None,
                    epoch: int = 0, config_digest: str = "", meta: Optional[dict] = None) -> None:
    ckpt = Checkpoint(model, dict(optim_buffers or {}), epoch, config_digest, dict(meta or {}))
    atomic_write_bytes(path, encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
