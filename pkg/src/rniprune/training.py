"""Training, fine-tuning and evaluation loops.

Optimisation follows the usual CIFAR recipe: SGD with momentum, coupled
weight decay and step learning-rate drops.  σBN scales form their own
parameter group with a larger learning rate and no weight decay.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, augment
from .fileio import write_csv
from .models import ModelGraph
from .norm import EVAL, SIGMA, TRAIN
from .optim import OptimState, sgd_step
from .regularizers import NONE, SparsityConfig, sparsity_loss
from .tensor import Tensor, add, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "sparsity_loss", "eval_acc", "lr")

# independent per-epoch random streams
_SHUFFLE_STREAM = 0
_AUGMENT_STREAM = 1


class NumericError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch, self.batch, self.value = epoch, batch, value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 64
    lr: float = 0.1
    lr_drops: Tuple[Tuple[int, float], ...] = ((80, 0.1), (120, 0.1))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    sigma_bn_lr_mult: float = 10.0
    sigma_bn_weight_decay: float = 0.0
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    seed: int = 0
    augment: bool = True
    eval_batch_size: int = 500

    def __post_init__(self):
        self.lr_drops = tuple((int(e), float(f)) for e, f in self.lr_drops)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if list(self.lr_drops) != sorted(self.lr_drops, key=lambda d: d[0]):
            raise ValueError("lr_drops must be sorted by epoch")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during (0-based) ``epoch``."""
        lr = self.lr
        for e, factor in self.lr_drops:
            if epoch >= e:
                lr *= factor
        return lr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    sparsity_loss: float
    eval_acc: float
    lr: float


@dataclass
class RunHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path, meta: Optional[Dict[str, str]] = None) -> None:
        rows = [[getattr(r, c) for c in HISTORY_COLUMNS] for r in self.records]
        write_csv(path, meta or {}, HISTORY_COLUMNS, rows)


@dataclass
class ParamGroup:
    params: List[Tuple[str, Tensor]]
    lr_mult: float
    weight_decay: float

    def names(self) -> List[str]:
        return [n for n, _ in self.params]


def param_groups(model: ModelGraph, config: TrainConfig) -> List[ParamGroup]:
    """Group 1: every parameter except σBN scales (config lr and weight decay,
    vanilla BN γ/β included).  Group 2, present only for σBN models: the σBN
    scales with ``lr·sigma_bn_lr_mult`` and ``sigma_bn_weight_decay``."""
    sigma_names = {f"{lid}.gamma" for lid, st in model.norm_states.items() if st.kind == SIGMA}
    base, sig = [], []
    for name, t in model.trainable():
        (sig if name in sigma_names else base).append((name, t))
    groups = [ParamGroup(base, 1.0, config.weight_decay)]
    if sig:
        groups.append(ParamGroup(sig, config.sigma_bn_lr_mult, config.sigma_bn_weight_decay))
    return groups


class Optimizer:
    """SGD over parameter groups; one momentum buffer per named parameter."""

    def __init__(self, groups: List[ParamGroup], config: TrainConfig,
                 buffers: Optional[Dict[str, np.ndarray]] = None):
        self.groups = groups
        self.config = config
        self.states = [OptimState(config.lr * g.lr_mult, config.momentum, g.weight_decay)
                       for g in groups]
        if buffers:
            for g, st in zip(groups, self.states):
                for name in g.names():
                    if name in buffers:
                        st.buffers[name] = np.array(buffers[name], copy=True)

    def set_epoch(self, epoch: int) -> float:
        lr = self.config.lr_at(epoch)
        for g, st in zip(self.groups, self.states):
            st.lr = lr * g.lr_mult
        return lr

    def step(self) -> None:
        for g, st in zip(self.groups, self.states):
            for name, p in g.params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                sgd_step(p, st, key=name)
                p.grad = None

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for st in self.states:
            out.update(st.buffers)
        return out


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a single leftover sample cannot provide batch statistics
    return [b for b in out if len(b) >= 2]


def evaluate(model: ModelGraph, dataset: Dataset, batch_size: int = 500) -> float:
    """Top-1 accuracy in eval mode (running statistics)."""
    correct = 0
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            logits = model.forward(dataset.images[i:i + batch_size], EVAL).data
            correct += int((logits.argmax(axis=1) == dataset.labels[i:i + batch_size]).sum())
    return correct / len(dataset)


def train(model: ModelGraph, dataset: Dataset, config: TrainConfig,
          eval_set: Optional[Dataset] = None, start_epoch: int = 0,
          optim_buffers: Optional[Dict[str, np.ndarray]] = None,
          history: Optional[RunHistory] = None,
          on_epoch_end: Optional[Callable[[int, ModelGraph, "Optimizer", RunHistory], None]] = None,
          ) -> Tuple[ModelGraph, RunHistory]:
    """Train ``model`` in place for epochs ``start_epoch .. config.epochs-1``.

    Batch order and augmentation for epoch ``e`` come from RNG streams seeded
    by ``(seed, e)``, so resuming from a checkpoint written after epoch
    ``e-1`` (with its momentum buffers) reproduces the uninterrupted run.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    history = history if history is not None else RunHistory()
    opt = Optimizer(param_groups(model, config), config, optim_buffers)
    for epoch in range(start_epoch, config.epochs):
        lr = opt.set_epoch(epoch)
        order_rng = np.random.default_rng([config.seed, epoch, _SHUFFLE_STREAM])
        aug_rng = np.random.default_rng([config.seed, epoch, _AUGMENT_STREAM])
        ce_sum = reg_sum = 0.0
        batches = _batches(len(dataset), config.batch_size, order_rng)
        for b, idx in enumerate(batches):
            x = dataset.images[idx]
            if config.augment:
                x = augment(x, aug_rng)
            logits = model.forward(x, TRAIN)
            ce = softmax_cross_entropy(logits, dataset.labels[idx])
            reg = sparsity_loss(config.sparsity, model.norm_states)
            loss = ce if reg is None else add(ce, reg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(epoch, b, value)
            loss.backward()
            opt.step()
            ce_sum += float(ce.data)
            reg_sum += 0.0 if reg is None else float(reg.data)
        acc = evaluate(model, eval_set, config.eval_batch_size) if eval_set is not None else float("nan")
        nb = max(1, len(batches))
        history.records.append(EpochRecord(epoch, ce_sum / nb, reg_sum / nb, acc, lr))
        log.info("epoch %d lr %.4g loss %.4f reg %.4f acc %.4f", epoch, lr, ce_sum / nb,
                 reg_sum / nb, acc)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, opt, history)
    return model, history


def finetune(model: ModelGraph, dataset: Dataset, config: TrainConfig,
             eval_set: Optional[Dataset] = None, **kw) -> Tuple[ModelGraph, RunHistory]:
    """The training loop with the sparsity penalty off.  Momentum starts from
    zero unless ``optim_buffers`` are passed to resume an interrupted run."""
    cfg = replace(config, sparsity=SparsityConfig(NONE, 0.0))
    return train(model, dataset, cfg, eval_set, **kw)
