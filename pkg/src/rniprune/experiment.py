"""The train → prune → fine-tune pipeline as plain functions.

Directory layout under a results root::

    results.csv
    <method>/seed<N>/model.ckpt          trained model
    <method>/seed<N>/last.ckpt           end-of-epoch state, used to resume
    <method>/seed<N>/history.csv
    <method>/seed<N>/importance_hist.csv
    <method>/seed<N>/<policy>_r<ratio>/  pruned.ckpt, plan.txt, cost.csv,
                                         layer_map.csv, finetuned.ckpt,
                                         finetune_history.csv

The config text travels inside every checkpoint, so downstream steps need
only the checkpoint path.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, parse_config
from .data import CIFAR10, CIFAR100, Dataset, load_cifar, synthetic_dataset
from .fileio import write_csv
from .models import build_model
from .pruning import apply_surgery, cost_report, layer_prune_map, score_model, select, write_plan
from .reports import HIST_FILE, LAYER_MAP_FILE, PROTOCOL_KEY, upsert_result, write_histogram
from .training import EpochRecord, RunHistory, evaluate, finetune, train

log = logging.getLogger(__name__)

TRAINED, PRUNED, FINETUNED = "trained", "pruned", "finetuned"


@dataclass
class RunPaths:
    root: Path
    method: str
    seed: int

    @property
    def run_dir(self) -> Path:
        return Path(self.root) / self.method / f"seed{self.seed}"

    @property
    def checkpoint(self) -> Path:
        return self.run_dir / "model.ckpt"

    @property
    def last(self) -> Path:
        return self.run_dir / "last.ckpt"

    @property
    def history(self) -> Path:
        return self.run_dir / "history.csv"

    @property
    def histogram(self) -> Path:
        return self.run_dir / HIST_FILE

    def prune_dir(self, policy: str, ratio: float) -> Path:
        return self.run_dir / f"{policy}_r{ratio:g}"


@dataclass
class ExperimentContext:
    """A parsed config together with its source text."""
    config: ExperimentConfig
    text: str

    @classmethod
    def from_file(cls, path) -> "ExperimentContext":
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config file not found", path=str(path))
        text = p.read_text()
        return cls(parse_config(text, str(path)), text)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ExperimentContext":
        text = ckpt.meta.get("config")
        if text is None:
            raise ConfigError("checkpoint carries no config; pass --config")
        return cls(parse_config(text, "<checkpoint>"), text)

    def meta(self, **extra) -> Dict[str, object]:
        cfg = self.config
        return {"config": self.text, PROTOCOL_KEY: cfg.protocol_digest, **extra}


def load_datasets(ctx: ExperimentContext) -> Tuple[Dataset, Dataset]:
    spec = ctx.config.data
    if spec.source == "synthetic":
        tr = synthetic_dataset(spec.num_classes, spec.train_size, seed=spec.subset_seed,
                               noise=spec.noise, jitter=spec.jitter, template_seed=spec.subset_seed)
        te = synthetic_dataset(spec.num_classes, spec.test_size, seed=spec.subset_seed + 1,
                               noise=spec.noise, jitter=spec.jitter, split="test",
                               stats=(tr.mean, tr.std), template_seed=spec.subset_seed)
        return tr, te
    variant = {"cifar10": CIFAR10, "cifar100": CIFAR100}[spec.source]
    tr = load_cifar(spec.dir, variant, "train",
                    subset=(spec.train_subset, spec.subset_seed) if spec.train_subset else None)
    te = load_cifar(spec.dir, variant, "test",
                    subset=(spec.test_subset, spec.subset_seed) if spec.test_subset else None,
                    stats=(tr.mean, tr.std))
    return tr, te


def _history_meta(ctx: ExperimentContext, method: str, seed: int, **extra) -> Dict[str, str]:
    return {PROTOCOL_KEY: ctx.config.protocol_digest, "digest": ctx.config.digest,
            "method": method, "seed": str(seed), **{k: str(v) for k, v in extra.items()}}


def _history_from_meta(records) -> RunHistory:
    return RunHistory([EpochRecord(**r) for r in records])


def run_train(ctx: ExperimentContext, seed: int, root=None,
              data: Optional[Tuple[Dataset, Dataset]] = None) -> Path:
    """Train one seed; resumes from ``last.ckpt`` when it matches the config."""
    cfg = ctx.config.for_seed(seed)
    paths = RunPaths(Path(root or cfg.out_dir), cfg.method, seed)
    train_set, test_set = data or load_datasets(ctx)
    start, buffers, history = 0, None, RunHistory()
    model = build_model(cfg.arch, train_set.num_classes, cfg.norm_kind, cfg.width_scale, seed=seed)
    if paths.last.exists():
        ck = load_checkpoint(paths.last)
        if ck.config_digest == cfg.digest and ck.meta.get("seed") == seed:
            model, buffers, start = ck.model, ck.optim_buffers, ck.epoch
            history = _history_from_meta(ck.meta.get("history", []))
            log.info("resuming %s from epoch %d", paths.run_dir, start)

    def checkpoint_epoch(epoch, m, opt, hist):
        save_checkpoint(paths.last, m, opt.buffers(), epoch + 1, cfg.digest,
                        ctx.meta(method=cfg.method, seed=seed, stage="partial",
                                 history=[asdict(r) for r in hist.records]))

    if start < cfg.train.epochs:
        train(model, train_set, cfg.train, test_set, start_epoch=start, optim_buffers=buffers,
              history=history, on_epoch_end=checkpoint_epoch)
    acc = evaluate(model, test_set, cfg.train.eval_batch_size)
    save_checkpoint(paths.checkpoint, model, {}, cfg.train.epochs, cfg.digest,
                    ctx.meta(method=cfg.method, seed=seed, stage=TRAINED, acc=acc))
    history.write_csv(paths.history, _history_meta(ctx, cfg.method, seed))
    scores = [v for _, _, v in score_model(model).entries]
    write_histogram(paths.histogram, scores, cfg.norm_kind,
                    _history_meta(ctx, cfg.method, seed))
    upsert_result(paths.root, cfg.protocol_digest, cfg.method, 0.0, seed, acc, 1.0,
                  model.num_params())
    return paths.checkpoint


def method_label(ctx: ExperimentContext, policy: str) -> str:
    cfg = ctx.config
    return cfg.method if policy == cfg.policy else f"{cfg.method}-{policy}"


def run_prune(checkpoint, ratio: float, policy: Optional[str] = None, root=None,
              ctx: Optional[ExperimentContext] = None,
              data: Optional[Tuple[Dataset, Dataset]] = None) -> Path:
    """Prune a trained checkpoint; returns the pruned checkpoint path."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"pruning ratio must lie in (0, 1), got {ratio}", field="ratio")
    ck = load_checkpoint(checkpoint)
    ctx = ctx or ExperimentContext.from_checkpoint(ck)
    cfg = ctx.config
    policy = policy or cfg.policy
    seed = int(ck.meta.get("seed", cfg.seeds[0]))
    method = method_label(ctx, policy)
    paths = RunPaths(Path(root or cfg.out_dir), cfg.method, seed)
    out = paths.prune_dir(policy, ratio)
    _, test_set = data or load_datasets(ctx)

    plan = select(score_model(ck.model), ratio, policy)
    pruned = apply_surgery(ck.model, plan)
    cost = cost_report(pruned, ck.model)
    acc_before = evaluate(ck.model, test_set, cfg.train.eval_batch_size)
    acc_after = evaluate(pruned, test_set, cfg.train.eval_batch_size)

    meta = _history_meta(ctx, method, seed, ratio=repr(float(ratio)), policy=policy)
    save_checkpoint(out / "pruned.ckpt", pruned, {}, 0, cfg.digest,
                    ctx.meta(method=method, seed=seed, stage=PRUNED, ratio=float(ratio),
                             policy=policy, acc=acc_after, flops_rel=cost.flops_rel))
    write_plan(plan, out / "plan.txt", {PROTOCOL_KEY: cfg.protocol_digest})
    write_csv(out / "cost.csv", meta,
              ("params_total", "flops_total", "params_rel", "flops_rel", "requested_count",
               "achieved_count", "acc_unpruned", "acc_pruned", "acc_drop"),
              [(cost.params_total, cost.flops_total, cost.params_rel, cost.flops_rel,
                plan.requested_count, plan.achieved_count, acc_before, acc_after,
                acc_before - acc_after)])
    widths = {s.id: s.out_channels for s in ck.model.layers}
    write_csv(out / LAYER_MAP_FILE, meta, ("layer", "width", "removed", "fraction"),
              [(lid, widths[lid], len(plan.victims.get(lid, ())), frac)
               for lid, frac in layer_prune_map(plan, ck.model)])
    log.info("pruned %s at %.2f: flops %.3f acc %.4f -> %.4f", checkpoint, ratio,
             cost.flops_rel, acc_before, acc_after)
    return out / "pruned.ckpt"


def run_finetune(checkpoint, root=None, ctx: Optional[ExperimentContext] = None,
                 data: Optional[Tuple[Dataset, Dataset]] = None) -> Tuple[Path, float]:
    """Fine-tune a pruned checkpoint and record its results row."""
    ck = load_checkpoint(checkpoint)
    if ck.meta.get("stage") != PRUNED:
        raise ConfigError(f"{checkpoint} is not a pruned checkpoint")
    ctx = ctx or ExperimentContext.from_checkpoint(ck)
    cfg = ctx.config
    seed, method, ratio = int(ck.meta["seed"]), ck.meta["method"], float(ck.meta["ratio"])
    root = Path(root or cfg.out_dir)
    out = Path(checkpoint).parent
    train_set, test_set = data or load_datasets(ctx)
    model, history = finetune(ck.model, train_set, cfg.for_seed(seed).finetune, test_set)
    acc = evaluate(model, test_set, cfg.finetune.eval_batch_size)
    save_checkpoint(out / "finetuned.ckpt", model, {}, cfg.finetune.epochs, cfg.digest,
                    {**ck.meta, "stage": FINETUNED, "acc": acc})
    history.write_csv(out / "finetune_history.csv",
                      _history_meta(ctx, method, seed, ratio=repr(ratio)))
    upsert_result(root, cfg.protocol_digest, method, ratio, seed, acc,
                  float(ck.meta["flops_rel"]), model.num_params())
    return out / "finetuned.ckpt", acc


def run_eval(checkpoint, ctx: Optional[ExperimentContext] = None) -> float:
    ck = load_checkpoint(checkpoint)
    ctx = ctx or ExperimentContext.from_checkpoint(ck)
    _, test_set = load_datasets(ctx)
    return evaluate(ck.model, test_set, ctx.config.train.eval_batch_size)


def _done(path: Path, digest: str) -> bool:
    if not path.exists():
        return False
    try:
        return load_checkpoint(path).config_digest == digest
    except Exception:
        return False


def run_pipeline(ctx: ExperimentContext, root=None, seeds=None,
                 data: Optional[Tuple[Dataset, Dataset]] = None) -> Path:
    """Every seed and ratio of a config.  Finished steps whose checkpoints
    match the config digest are skipped, so an interrupted sweep resumes."""
    cfg = ctx.config
    root = Path(root or cfg.out_dir)
    data = data or load_datasets(ctx)
    for seed in seeds or cfg.seeds:
        paths = RunPaths(root, cfg.method, seed)
        if not _done(paths.checkpoint, cfg.digest):
            run_train(ctx, seed, root, data)
        for ratio in cfg.ratios:
            pdir = paths.prune_dir(cfg.policy, ratio)
            if not _done(pdir / "finetuned.ckpt", cfg.digest):
                pruned = run_prune(paths.checkpoint, ratio, cfg.policy, root, ctx, data)
                run_finetune(pruned, root, ctx, data)
    return root
