"""CIFAR-10/100 binary ingestion, augmentation, subsetting, synthetic data.

The binary layouts are fixed: CIFAR-10 records are 3073 bytes (label byte
plus 3x1024 channel-planar pixels), CIFAR-100 records are 3074 bytes
(coarse label, fine label, pixels); the fine label is what training uses.
Pixels scale to [0, 1] and are then channel-normalized with constants
computed once from the training split and cached beside the archives,
since no canonical values ship with the data.

Everything downstream is a pure function of (seed, epoch, index): batch
composition and augmentation never depend on timing, so a prefetching
loader cannot change results.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import seeded_rng

DATA_DIR_ENV = "PRPT_DATA_DIR"

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]
CIFAR100_TRAIN_FILES = ["train.bin"]
CIFAR100_TEST_FILES = ["test.bin"]

_PIXELS = 3 * 32 * 32
_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


class DataError(ValueError):
    """Malformed archive: truncation (with byte offset) or bad label byte."""


@dataclass
class DatasetHandle:
    source: str                  # cifar10 | cifar100 | synthetic
    split: str                   # train | test
    images: np.ndarray           # (N, 3, 32, 32) float32, already normalized
    labels: np.ndarray           # (N,) int64
    num_classes: int
    mean: np.ndarray             # per-channel constants used
    std: np.ndarray
    subset: tuple | None = None  # (count, seed) if subsampled

    def __len__(self):
        return len(self.labels)


def resolve_data_dir(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path("data")


def _archive_paths(root: Path, which: str, split: str) -> list:
    files = {
        ("cifar10", "train"): CIFAR10_TRAIN_FILES,
        ("cifar10", "test"): CIFAR10_TEST_FILES,
        ("cifar100", "train"): CIFAR100_TRAIN_FILES,
        ("cifar100", "test"): CIFAR100_TEST_FILES,
    }[(which, split)]
    base = root / _SUBDIRS[which]
    if not base.is_dir():
        base = root
    paths = [base / f for f in files]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DataError(f"missing {which} {split} archive(s): {', '.join(missing)}")
    return paths


def _read_records(path: Path, record_len: int):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record_len != 0:
        good = (raw.size // record_len) * record_len
        raise DataError(
            f"{path}: truncated archive, size {raw.size} is not a multiple of "
            f"{record_len}-byte records (truncation at byte offset {good})"
        )
    return raw.reshape(-1, record_len)


def _decode(records: np.ndarray, which: str):
    if which == "cifar10":
        labels = records[:, 0].astype(np.int64)
        if labels.max(initial=0) > 9:
            bad = int(np.argmax(labels > 9))
            raise DataError(f"record {bad}: label byte {labels[bad]} out of range [0, 10)")
        pixels = records[:, 1:]
    else:
        coarse = records[:, 0].astype(np.int64)
        labels = records[:, 1].astype(np.int64)
        if coarse.max(initial=0) > 19:
            bad = int(np.argmax(coarse > 19))
            raise DataError(f"record {bad}: coarse label byte {coarse[bad]} out of range [0, 20)")
        if labels.max(initial=0) > 99:
            bad = int(np.argmax(labels > 99))
            raise DataError(f"record {bad}: fine label byte {labels[bad]} out of range [0, 100)")
        pixels = records[:, 2:]
    images = pixels.reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def _norm_stats_path(root: Path, which: str) -> Path:
    base = root / _SUBDIRS[which]
    if not base.is_dir():
        base = root
    return base / f"normalization-{which}.json"


def compute_norm_stats(images: np.ndarray):
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(np.float32), std.astype(np.float32)


def load_or_compute_norm_stats(root: Path, which: str) -> tuple:
    """Per-channel mean/std from the training split, cached beside the data."""
    stats_path = _norm_stats_path(root, which)
    if stats_path.is_file():
        stats = json.loads(stats_path.read_text())
        return (np.asarray(stats["mean"], dtype=np.float32),
                np.asarray(stats["std"], dtype=np.float32))
    images = None
    for path in _archive_paths(root, which, "train"):
        rec_len = 3073 if which == "cifar10" else 3074
        chunk, _ = _decode(_read_records(path, rec_len), which)
        images = chunk if images is None else np.concatenate([images, chunk])
    mean, std = compute_norm_stats(images)
    try:
        stats_path.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    except OSError:
        pass  # read-only data dir: recompute next time
    return mean, std


def _apply_subset(images, labels, subset):
    if subset is None:
        return images, labels
    count, seed = subset
    if count > len(labels):
        raise DataError(f"subset of {count} exceeds dataset size {len(labels)}")
    idx = seeded_rng(seed, "subset").permutation(len(labels))[:count]
    idx.sort()
    return images[idx], labels[idx]


def load_cifar(path=None, which: str = "cifar10", split: str = "train",
               subset: tuple | None = None) -> DatasetHandle:
    """Load CIFAR binary archives into a normalized, ready-to-train handle."""
    if which not in ("cifar10", "cifar100"):
        raise ValueError(f"unknown dataset {which!r}")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    root = resolve_data_dir(path)
    record_len = 3073 if which == "cifar10" else 3074
    images, labels = None, None
    for p in _archive_paths(root, which, split):
        chunk_images, chunk_labels = _decode(_read_records(p, record_len), which)
        images = chunk_images if images is None else np.concatenate([images, chunk_images])
        labels = chunk_labels if labels is None else np.concatenate([labels, chunk_labels])
    stats_path = _norm_stats_path(root, which)
    if not stats_path.is_file() and split == "train":
        mean, std = compute_norm_stats(images)
        try:
            stats_path.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
        except OSError:
            pass
    else:
        mean, std = load_or_compute_norm_stats(root, which)
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    images, labels = _apply_subset(images, labels, subset)
    return DatasetHandle(
        source=which, split=split, images=images, labels=labels,
        num_classes=10 if which == "cifar10" else 100,
        mean=mean, std=std, subset=subset,
    )


def make_synthetic(num_classes: int = 10, count: int = 100, seed: int = 0,
                   split: str = "train") -> DatasetHandle:
    """Class-conditional Gaussian blobs, linearly separable by construction.

    Labels are stratified exactly: sample i gets class i mod num_classes.
    """
    rng = seeded_rng(seed, "synthetic", split)
    prototypes = rng.standard_normal((num_classes, 3, 32, 32)).astype(np.float32)
    labels = (np.arange(count) % num_classes).astype(np.int64)
    noise = rng.standard_normal((count, 3, 32, 32)).astype(np.float32)
    images = prototypes[labels] + np.float32(0.25) * noise
    return DatasetHandle(
        source="synthetic", split=split, images=images, labels=labels,
        num_classes=num_classes,
        mean=np.zeros(3, dtype=np.float32), std=np.ones(3, dtype=np.float32),
    )


# -- augmentation ---------------------------------------------------------------


def hflip(image: np.ndarray) -> np.ndarray:
    """Horizontal mirror; applying it twice restores the input."""
    return image[:, :, ::-1].copy()


def pad_crop(image: np.ndarray, offset_y: int, offset_x: int, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` on every side, then crop back to the original size
    starting at (offset_y, offset_x); offsets of (pad, pad) are the identity."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, offset_y:offset_y + h, offset_x:offset_x + w].copy()


def augment_image(image: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    out = pad_crop(image, oy, ox, pad)
    if rng.integers(0, 2) == 1:
        out = hflip(out)
    return out


def augmentation_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return seeded_rng(seed, "augment", epoch, index)


def epoch_order(handle: DatasetHandle, seed: int, epoch: int) -> np.ndarray:
    return seeded_rng(seed, "shuffle", epoch).permutation(len(handle))


def make_batch(handle: DatasetHandle, indices: np.ndarray, seed: int, epoch: int,
               augment: bool = True) -> tuple:
    """Assemble one minibatch; content depends only on (seed, epoch, indices)."""
    if augment and handle.split == "train":
        images = np.stack([
            augment_image(handle.images[i], augmentation_rng(seed, epoch, int(i)))
            for i in indices
        ])
    else:
        images = handle.images[indices]
    return images, handle.labels[indices]


def iter_batches(handle: DatasetHandle, batch_size: int, seed: int, epoch: int,
                 augment: bool = True, workers: int = 1):
    """Yield (images, labels) minibatches in the epoch's shuffled order.

    With workers > 1 the next batch is assembled on a background thread
    while the current one trains; batch content is seed-determined, so the
    overlap cannot change results.
    """
    order = epoch_order(handle, seed, epoch)
    slices = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if workers <= 1:
        for idx in slices:
            yield make_batch(handle, idx, seed, epoch, augment)
        return
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(make_batch, handle, slices[0], seed, epoch, augment)
        for nxt in slices[1:]:
            ready = pending.result()
            pending = pool.submit(make_batch, handle, nxt, seed, epoch, augment)
            yield ready
        yield pending.result()
