"""Experiment configuration files.

A config is a flat INI file with the sections ``[experiment]``, ``[data]``,
``[train]``, ``[sparsity]`` and optionally ``[finetune]`` (keys there
override ``[train]`` for the fine-tuning stage).  Two digests are derived
from the canonicalised content:

* ``digest`` covers everything and identifies one run configuration;
* ``protocol_digest`` covers only what different methods must share to be
  comparable (architecture, width, data, schedules).  Result files carry it
  so a report can refuse directories that mix protocols.
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .models import RESNET56, VGG16
from .norm import SIGMA, VANILLA
from .pruning import GLOBAL, UNIFORM
from .regularizers import L1, NONE, RNI, SparsityConfig
from .training import TrainConfig

SECTIONS = ("experiment", "data", "train", "sparsity", "finetune")
PROTOCOL_KEYS = {
    "experiment": ("arch", "width_scale"),
    "data": None,
    "train": None,
    "finetune": None,
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None,
                 path: Optional[str] = None):
        self.line, self.field, self.path = line, field, path
        where = []
        if path:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field}")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


@dataclass
class DataSpec:
    source: str = "synthetic"           # cifar10 | cifar100 | synthetic
    dir: str = ""
    train_subset: int = 0               # 0 = full split
    test_subset: int = 0
    subset_seed: int = 0
    num_classes: int = 10               # synthetic only
    train_size: int = 2000
    test_size: int = 500
    noise: float = 0.1
    jitter: float = 0.0


@dataclass
class ExperimentConfig:
    arch: str
    width_scale: float
    norm_kind: str
    method: str
    policy: str
    ratios: Tuple[float, ...]
    seeds: Tuple[int, ...]
    out_dir: str
    data: DataSpec
    train: TrainConfig
    finetune: TrainConfig
    digest: str = ""
    protocol_digest: str = ""
    path: str = ""

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed),
                       finetune=replace(self.finetune, seed=seed))


def _canonical(cp: configparser.ConfigParser, keys: Optional[Dict[str, Optional[tuple]]] = None) -> str:
    lines = []
    for sec in sorted(cp.sections()):
        if keys is not None and sec not in keys:
            continue
        wanted = keys.get(sec) if keys is not None else None
        lines.append(f"[{sec}]")
        for k in sorted(cp[sec]):
            if wanted is not None and k not in wanted:
                continue
            lines.append(f"{k}={' '.join(cp[sec][k].split())}")
    return "\n".join(lines) + "\n"


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _line_index(text: str) -> Dict[Tuple[str, str], int]:
    index, sec = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[(.+)\]$", line)
        if m:
            sec = m.group(1).strip()
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and sec is not None:
            index[(sec, m.group(1).strip().lower())] = no
    return index


class _Fields:
    """Typed access to one section with line-numbered errors."""

    def __init__(self, cp, section, lines, path):
        self.sec = cp[section] if cp.has_section(section) else {}
        self.name, self.lines, self.path = section, lines, path
        self.used = set()

    def _err(self, key, msg):
        return ConfigError(msg, self.lines.get((self.name, key)), f"{self.name}.{key}", self.path)

    def raw(self, key, default=None, required=False):
        self.used.add(key)
        if key in self.sec:
            return self.sec[key].strip()
        if required:
            raise ConfigError("missing required field", None, f"{self.name}.{key}", self.path)
        return default

    def get(self, key, conv, default=None, required=False):
        raw = self.raw(key, None, required)
        if raw is None:
            return default
        try:
            return conv(raw)
        except (TypeError, ValueError) as exc:
            raise self._err(key, f"cannot parse {raw!r}: {exc}") from None

    def choice(self, key, options, default=None):
        v = self.raw(key, default, required=default is None)
        if v not in options:
            raise self._err(key, f"expected one of {sorted(options)}, got {v!r}")
        return v

    def check_unknown(self):
        for k in self.sec:
            if k not in self.used:
                raise self._err(k, "unknown field")


def _floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in raw.replace(",", " ").split())


def _ints(raw: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in raw.replace(",", " ").split())


def _drops(raw: str) -> Tuple[Tuple[int, float], ...]:
    if raw.lower() in ("", "none"):
        return ()
    out = []
    for item in raw.replace(",", " ").split():
        e, f = item.split(":")
        out.append((int(e), float(f)))
    return tuple(out)


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _train_config(f: _Fields, base: Optional[TrainConfig], sparsity: SparsityConfig) -> TrainConfig:
    b = base or TrainConfig(sparsity=sparsity)
    try:
        return TrainConfig(
            epochs=f.get("epochs", int, b.epochs),
            batch_size=f.get("batch_size", int, b.batch_size),
            lr=f.get("lr", float, b.lr),
            lr_drops=f.get("lr_drops", _drops, b.lr_drops),
            momentum=f.get("momentum", float, b.momentum),
            weight_decay=f.get("weight_decay", float, b.weight_decay),
            sigma_bn_lr_mult=f.get("sigma_bn_lr_mult", float, b.sigma_bn_lr_mult),
            sigma_bn_weight_decay=0.0,
            sparsity=sparsity,
            augment=f.get("augment", _bool, b.augment),
            eval_batch_size=f.get("eval_batch_size", int, b.eval_batch_size),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), None, f.name, f.path) from None


def parse_config(text: str, path: str = "<string>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=path)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line, None, path) from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(exc.message if hasattr(exc, "message") else str(exc), line, None,
                          path) from None
    lines = _line_index(text)
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", None, sec, path)

    ex = _Fields(cp, "experiment", lines, path)
    arch = ex.choice("arch", {VGG16, RESNET56})
    width = ex.get("width_scale", float, 1.0)
    if not 0 < width <= 1:
        raise ex._err("width_scale", "must lie in (0, 1]")
    norm = ex.choice("norm", {VANILLA, SIGMA}, SIGMA)
    policy = ex.choice("policy", {GLOBAL, UNIFORM}, GLOBAL)
    ratios = ex.get("ratios", _floats, (0.5, 0.9))
    if any(not 0 < r < 1 for r in ratios) or list(ratios) != sorted(set(ratios)):
        raise ex._err("ratios", "ratios must lie in (0, 1) and be strictly increasing")
    seeds = ex.get("seeds", _ints, (0,))
    if not seeds:
        raise ex._err("seeds", "at least one seed is required")
    out_dir = ex.get("out", str, "runs")

    sp = _Fields(cp, "sparsity", lines, path)
    smethod = sp.choice("method", {RNI, L1, NONE}, NONE)
    try:
        sparsity = SparsityConfig(smethod, sp.get("lambda_s", float, 0.0), sp.get("b", float, 0.0),
                                  sp.get("target_layers", lambda r: frozenset(r.replace(",", " ").split()), None))
    except ValueError as exc:
        raise ConfigError(str(exc), lines.get(("sparsity", "lambda_s")), "sparsity.lambda_s", path) from None
    if smethod == RNI and norm != SIGMA:
        raise ex._err("norm", "RNI needs sigma norm layers")
    default_method = {RNI: "rni", L1: "slimming", NONE: "ucs" if policy == UNIFORM else "baseline"}[smethod]
    method = ex.get("method", str, default_method)
    ex.check_unknown()
    sp.check_unknown()

    da = _Fields(cp, "data", lines, path)
    data = DataSpec(
        source=da.choice("source", {"cifar10", "cifar100", "synthetic"}, "synthetic"),
        dir=da.get("dir", str, ""),
        train_subset=da.get("train_subset", int, 0),
        test_subset=da.get("test_subset", int, 0),
        subset_seed=da.get("subset_seed", int, 0),
        num_classes=da.get("num_classes", int, 10),
        train_size=da.get("train_size", int, 2000),
        test_size=da.get("test_size", int, 500),
        noise=da.get("noise", float, 0.1),
        jitter=da.get("jitter", float, 0.0),
    )
    if data.source != "synthetic" and not data.dir:
        raise ConfigError("CIFAR sources need a directory", None, "data.dir", path)
    da.check_unknown()

    tr = _Fields(cp, "train", lines, path)
    train = _train_config(tr, None, sparsity)
    tr.check_unknown()
    ft = _Fields(cp, "finetune", lines, path)
    finetune = _train_config(ft, replace(train, sparsity=SparsityConfig()), SparsityConfig())
    ft.check_unknown()

    return ExperimentConfig(arch, width, norm, method, policy, tuple(ratios), tuple(seeds),
                            out_dir, data, train, finetune,
                            digest=_digest(_canonical(cp)),
                            protocol_digest=_digest(_canonical(cp, PROTOCOL_KEYS)),
                            path=path)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config file not found", None, None, str(path))
    return parse_config(p.read_text(), str(path))
