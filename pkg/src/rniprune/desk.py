"""Desk-scale protocol: VGG-16 at width 0.25, 5000/1000 images, 20 epochs.

Four training arms share one protocol digest, so their results land in a
single results root:

* ``bn``       vanilla BN, no sparsity
* ``sigma``    σBN, no sparsity
* ``rni``      σBN with RNI (λ_S=1e-3, b=3), pruned globally
* ``slimming`` vanilla BN with L1 (λ_S=1e-4), pruned globally

The check functions read finished runs back from disk.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .config import parse_config
from .experiment import ExperimentContext, RunPaths, load_datasets, run_pipeline, run_train
from .fileio import read_csv
from .pruning import GLOBAL, score_model
from .reports import LAYER_MAP_FILE

SEEDS = (1, 2, 3)
RATIOS = (0.5, 0.9)
ARMS = {
    "bn": ("vanilla", "none", 0.0, 0.0),
    "sigma": ("sigma", "none", 0.0, 0.0),
    "rni": ("sigma", "rni", 1e-3, 3.0),
    "slimming": ("vanilla", "l1", 1e-4, 0.0),
}
PRUNED_ARMS = ("rni", "slimming")


@dataclass
class DeskData:
    source: str = "cifar10"
    dir: str = ""
    train_subset: int = 5000
    test_subset: int = 1000
    noise: float = 1.0
    jitter: float = 8.0


def config_text(arm: str, data: DeskData, out: str, seeds: Sequence[int] = SEEDS,
                epochs: int = 20) -> str:
    norm, method, lam, b = ARMS[arm]
    if data.source == "synthetic":
        data_lines = (f"source = synthetic\ntrain_size = {data.train_subset}\n"
                      f"test_size = {data.test_subset}\nnoise = {data.noise}\njitter = {data.jitter}\n")
    else:
        data_lines = (f"source = {data.source}\ndir = {data.dir}\n"
                      f"train_subset = {data.train_subset}\ntest_subset = {data.test_subset}\n")
    drops = f"{epochs // 2}:0.1, {3 * epochs // 4}:0.1"
    return (f"[experiment]\narch = vgg16\nwidth_scale = 0.25\nnorm = {norm}\nmethod = {arm}\n"
            f"policy = global\nratios = {', '.join(str(r) for r in RATIOS)}\n"
            f"seeds = {', '.join(str(s) for s in seeds)}\nout = {out}\n\n"
            f"[data]\n{data_lines}\n"
            f"[train]\nepochs = {epochs}\nbatch_size = 64\nlr = 0.1\nlr_drops = {drops}\n"
            f"momentum = 0.9\nweight_decay = 1e-4\nsigma_bn_lr_mult = 10\naugment = true\n\n"
            f"[sparsity]\nmethod = {method}\nlambda_s = {lam}\nb = {b}\n")


def context(arm: str, data: DeskData, out, seeds=SEEDS, epochs: int = 20) -> ExperimentContext:
    text = config_text(arm, data, str(out), seeds, epochs)
    return ExperimentContext(parse_config(text, f"<desk:{arm}>"), text)


def run_arms(data: DeskData, out, arms: Sequence[str] = tuple(ARMS), seeds=SEEDS,
             epochs: int = 20) -> Path:
    """Train every arm (and prune/fine-tune the pruned arms); finished steps
    are reused."""
    out = Path(out)
    shared = None
    for arm in arms:
        ctx = context(arm, data, out, seeds, epochs)
        if shared is None:
            shared = load_datasets(ctx)
        if arm in PRUNED_ARMS:
            run_pipeline(ctx, out, data=shared)
        else:
            for seed in seeds:
                ck = RunPaths(out, arm, seed).checkpoint
                if not (ck.exists() and load_checkpoint(ck).config_digest == ctx.config.digest):
                    run_train(ctx, seed, out, shared)
    return out


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------

def trained_acc(out, arm: str, seeds=SEEDS) -> List[float]:
    return [float(load_checkpoint(RunPaths(Path(out), arm, s).checkpoint).meta["acc"]) for s in seeds]


def finetuned_acc(out, arm: str, ratio: float, seeds=SEEDS) -> List[float]:
    return [float(load_checkpoint(RunPaths(Path(out), arm, s).prune_dir(GLOBAL, ratio)
                                  / "finetuned.ckpt").meta["acc"]) for s in seeds]


def parity_gap(out, seeds=SEEDS) -> float:
    """|median acc(BN) - median acc(σBN)| in accuracy points."""
    return 100 * abs(statistics.median(trained_acc(out, "bn", seeds))
                     - statistics.median(trained_acc(out, "sigma", seeds)))


def importance_modes(out, arm: str = "rni", seeds=SEEDS) -> List[Dict[str, float]]:
    """Per seed: fraction of channels with σ(γ) < 0.05 and with σ(γ) > 0.5."""
    res = []
    for s in seeds:
        model = load_checkpoint(RunPaths(Path(out), arm, s).checkpoint).model
        v = np.array([e[2] for e in score_model(model).entries])
        res.append({"low": float((v < 0.05).mean()), "high": float((v > 0.5).mean())})
    return res


def early_layer_fraction(out, arm: str, ratio: float, seeds=SEEDS,
                         layers=("conv1", "conv2")) -> float:
    """Mean over seeds of the share of filters removed from ``layers``."""
    fr = []
    for s in seeds:
        p = RunPaths(Path(out), arm, s).prune_dir(GLOBAL, ratio) / LAYER_MAP_FILE
        _, rows = read_csv(p)
        rows = [r for r in rows if r["layer"] in layers]
        fr.append(sum(int(r["removed"]) for r in rows) / sum(int(r["width"]) for r in rows))
    return float(np.mean(fr))
