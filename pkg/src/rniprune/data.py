"""CIFAR binary ingestion, augmentation, and synthetic stand-in datasets."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

CIFAR10 = "cifar10"
CIFAR100 = "cifar100"

_PIXELS = 3 * 32 * 32
_LAYOUT = {
    # variant: (label bytes per record, label offset used, num classes, train files, test files)
    CIFAR10: (1, 0, 10, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    CIFAR100: (2, 1, 100, ["train.bin"], ["test.bin"]),
}


class DataError(Exception):
    """Base class for dataset problems."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class RecordSizeError(DataError):
    pass


class LabelRangeError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, 3, 32, 32) float32, normalised
    labels: np.ndarray          # (N,) int64
    num_classes: int
    split: str
    mean: np.ndarray            # per-channel constants applied to [0, 1] pixels
    std: np.ndarray
    name: str = ""

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelRangeError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def channel_stats(images01: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = images01.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images01.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), np.maximum(std, 1e-8).astype(np.float32)


def normalise(images01: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((images01 - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def _read_records(path: Path, variant: str) -> Tuple[np.ndarray, np.ndarray]:
    nlabel, offset, num_classes, _, _ = _LAYOUT[variant]
    if not path.is_file():
        raise MissingFileError(f"missing CIFAR file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    rec = nlabel + _PIXELS
    if raw.size == 0 or raw.size % rec:
        raise RecordSizeError(f"{path}: size {raw.size} is not a multiple of {rec}-byte records")
    raw = raw.reshape(-1, rec)
    labels = raw[:, offset].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise LabelRangeError(f"{path}: record {bad[0]} has label {labels[bad[0]]} "
                              f">= {num_classes}")
    return raw[:, nlabel:].reshape(-1, 3, 32, 32), labels


def stratified_indices(labels: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Seeded class-balanced sample of ``count`` indices, sorted ascending.

    Each class contributes ``count // C`` items; the remainder goes to the
    lowest class ids.  Classes with too few items give what they have.
    """
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    base, extra = divmod(count, len(classes))
    picks = []
    for i, c in enumerate(classes):
        pool = np.flatnonzero(labels == c)
        k = min(len(pool), base + (1 if i < extra else 0))
        picks.append(rng.permutation(pool)[:k])
    return np.sort(np.concatenate(picks))


def load_cifar(directory, variant: str = CIFAR10, split: str = "train",
               subset: Optional[Tuple[int, int]] = None,
               stats: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Dataset:
    """Read the canonical CIFAR binary batches from ``directory``.

    Pixels are scaled to [0, 1] and normalised per channel.  Normalisation
    constants come from ``stats`` when given; otherwise from this split (after
    subsetting) for ``train``, or from the full train files for ``test``.
    CIFAR-100 uses the fine label.  ``subset=(count, seed)`` draws a seeded
    class-stratified sample; record order is preserved.
    """
    if variant not in _LAYOUT:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    directory = Path(directory)
    _, _, num_classes, train_files, test_files = _LAYOUT[variant]
    files = train_files if split == "train" else test_files
    parts = [_read_records(directory / f, variant) for f in files]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    if subset is not None:
        idx = stratified_indices(labels, *subset)
        pixels, labels = pixels[idx], labels[idx]
    images01 = pixels.astype(np.float32) / np.float32(255.0)
    if stats is None:
        if split == "train":
            stats = channel_stats(images01)
        else:
            train = [_read_records(directory / f, variant)[0] for f in train_files]
            stats = channel_stats(np.concatenate(train).astype(np.float32) / np.float32(255.0))
    mean, std = stats
    return Dataset(normalise(images01, mean, std), labels, num_classes, split,
                   np.asarray(mean, np.float32), np.asarray(std, np.float32), name=variant)


def write_cifar_records(path, pixels: np.ndarray, labels: np.ndarray, variant: str = CIFAR10,
                        coarse: Optional[np.ndarray] = None) -> None:
    """Write uint8 (N, 3, 32, 32) pixels in the CIFAR binary record layout."""
    nlabel = _LAYOUT[variant][0]
    n = len(labels)
    rec = np.empty((n, nlabel + _PIXELS), dtype=np.uint8)
    if variant == CIFAR100:
        rec[:, 0] = coarse if coarse is not None else 0
        rec[:, 1] = labels
    else:
        rec[:, 0] = labels
    rec[:, nlabel:] = pixels.reshape(n, -1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rec.tofile(path)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4,
            offsets: Optional[np.ndarray] = None, flips: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size, and flip
    horizontally with probability 1/2.

    ``offsets`` (N, 2) and ``flips`` (N,) override the random draws.  The rng
    is consumed identically either way so streams stay aligned.
    """
    n, c, h, w = images.shape
    draw_off = rng.integers(0, 2 * pad + 1, size=(n, 2))
    draw_flip = rng.random(n) < 0.5
    offsets = draw_off if offsets is None else np.asarray(offsets)
    flips = draw_flip if flips is None else np.asarray(flips, dtype=bool)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def synthetic_dataset(num_classes: int = 10, n: int = 1000, seed: int = 0, noise: float = 0.1,
                      jitter: float = 0.0, split: str = "train",
                      stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                      template_seed: Optional[int] = None) -> Dataset:
    """Class-dependent Gaussian blobs rendered into 3×32×32 images.

    Each class owns a template (blob centre, width and colour, drawn from
    ``template_seed``, default ``seed``).  Samples are the class template,
    optionally shifted by up to ``jitter`` pixels, plus N(0, noise²) pixel
    noise, clipped to [0, 1].  Labels are assigned round-robin and then
    shuffled, so class counts differ by at most one.  Use the same
    ``template_seed`` for train and test splits of one task.
    """
    if n < num_classes:
        raise ValueError("need n >= num_classes")
    trng = np.random.default_rng(seed if template_seed is None else template_seed)
    centres = trng.uniform(8, 24, size=(num_classes, 2))
    widths = trng.uniform(3, 7, size=num_classes)
    colours = trng.uniform(0.2, 1.0, size=(num_classes, 3))
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    shifts = rng.uniform(-jitter, jitter, size=(n, 2)) if jitter else np.zeros((n, 2))
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    cy = centres[labels, 0] + shifts[:, 0]
    cx = centres[labels, 1] + shifts[:, 1]
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    blob = np.exp(-d2 / (2 * widths[labels][:, None, None] ** 2))
    images01 = colours[labels][:, :, None, None] * blob[:, None]
    images01 = images01 + noise * rng.standard_normal(images01.shape)
    images01 = np.clip(images01, 0.0, 1.0).astype(np.float32)
    mean, std = stats if stats is not None else channel_stats(images01)
    return Dataset(normalise(images01, mean, std), labels.astype(np.int64), num_classes, split,
                   np.asarray(mean, np.float32), np.asarray(std, np.float32), name="synthetic")


def class_templates(num_classes: int, seed: int) -> np.ndarray:
    """Noise-free template image of every class (in [0, 1])."""
    ds = synthetic_dataset(num_classes, num_classes, seed=seed, noise=0.0)
    out = np.empty((num_classes, 3, 32, 32), np.float32)
    raw = ds.images * ds.std[None, :, None, None] + ds.mean[None, :, None, None]
    for i, lab in enumerate(ds.labels):
        out[lab] = raw[i]
    return out
