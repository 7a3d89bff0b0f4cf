"""CIFAR-10 binary loading, synthetic pattern datasets, batching and flips."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autograd import Tensor

RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
RECORDS_PER_FILE = 10000


@dataclass
class Dataset:
    """Images stored raw (uint8 or float) together with per-channel normalization."""

    images: np.ndarray  # (n, C, H, W)
    labels: np.ndarray  # (n,) int64
    classes: int
    mean: np.ndarray  # (C,) in pixel units after scaling
    std: np.ndarray
    pixel_scale: float = 1.0

    def __len__(self) -> int:
        return len(self.labels)

    def normalized(self, idx=None) -> np.ndarray:
        raw = self.images if idx is None else self.images[idx]
        x = raw.astype(np.float64) / self.pixel_scale
        return (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.mean, self.std, self.pixel_scale)

    def batch(self, idx) -> "ImageBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageBatch(Tensor(self.normalized(idx)), self.labels[idx].copy())


@dataclass
class ImageBatch:
    images: Tensor
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def channel_stats(images: np.ndarray, pixel_scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    mean = np.zeros(images.shape[1])
    std = np.zeros(images.shape[1])
    for c in range(images.shape[1]):
        plane = images[:, c].astype(np.float64) / pixel_scale
        mean[c] = plane.mean()
        std[c] = plane.std()
    std[std == 0] = 1.0
    return mean, std


# ----------------------------------------------------------------------------
# CIFAR-10 binary layout
# ----------------------------------------------------------------------------


def parse_cifar_records(raw: bytes, name: str = "<bytes>", expected: Optional[int] = None):
    """Split CIFAR-10 binary records into (labels uint8, images uint8 (n, 3, 32, 32))."""
    if len(raw) % RECORD_BYTES:
        raise ValueError(f"{name}: size {len(raw)} is not a multiple of the {RECORD_BYTES}-byte record")
    n = len(raw) // RECORD_BYTES
    if expected is not None and n != expected:
        raise ValueError(
            f"{name}: expected {expected} records ({expected * RECORD_BYTES} bytes), found {len(raw)} bytes"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = arr[:, 0].copy()
    if n and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{name}: record {bad} has label byte {labels[bad]} > 9")
    return labels, arr[:, 1:].reshape(n, 3, 32, 32).copy()


def encode_cifar_records(labels: np.ndarray, images: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar_records`."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR records need uint8 (n, 3, 32, 32) images, got {images.dtype} {images.shape}")
    out = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(len(labels), -1)
    return out.tobytes()


def read_cifar_file(path: str, expected: Optional[int] = RECORDS_PER_FILE):
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_cifar_records(raw, name=path, expected=expected)


def load_cifar10(dir_path: str) -> tuple[Dataset, Dataset]:
    """Load the six canonical binary batch files, standardized by training-set statistics."""
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not os.path.isfile(os.path.join(dir_path, f))]
    if missing:
        raise FileNotFoundError(f"{dir_path}: missing CIFAR-10 batch files {', '.join(missing)}")
    parts = [read_cifar_file(os.path.join(dir_path, f)) for f in TRAIN_FILES]
    train_labels = np.concatenate([p[0] for p in parts]).astype(np.int64)
    train_images = np.concatenate([p[1] for p in parts])
    test_labels, test_images = read_cifar_file(os.path.join(dir_path, TEST_FILE))
    mean, std = channel_stats(train_images, 255.0)
    train = Dataset(train_images, train_labels, 10, mean, std, 255.0)
    test = Dataset(test_images, test_labels.astype(np.int64), 10, mean, std, 255.0)
    return train, test


def write_cifar10(dir_path: str, train_labels, train_images, test_labels, test_images) -> None:
    """Write 50000 + 10000 uint8 records in the canonical six-file layout."""
    if len(train_labels) != len(TRAIN_FILES) * RECORDS_PER_FILE or len(test_labels) != RECORDS_PER_FILE:
        raise ValueError("CIFAR-10 layout needs exactly 50000 training and 10000 test records")
    os.makedirs(dir_path, exist_ok=True)
    for i, name in enumerate(TRAIN_FILES):
        sl = slice(i * RECORDS_PER_FILE, (i + 1) * RECORDS_PER_FILE)
        with open(os.path.join(dir_path, name), "wb") as fh:
            fh.write(encode_cifar_records(train_labels[sl], train_images[sl]))
    with open(os.path.join(dir_path, TEST_FILE), "wb") as fh:
        fh.write(encode_cifar_records(test_labels, test_images))


# ----------------------------------------------------------------------------
# synthetic patterns
# ----------------------------------------------------------------------------


def _templates(side: int) -> list[np.ndarray]:
    r, c = np.mgrid[0:side, 0:side].astype(np.float64)
    mid = (side - 1) / 2
    rad = np.hypot(r - mid, c - mid)
    pats = [
        (r // 2) % 2,  # horizontal stripes
        (c // 2) % 2,  # vertical stripes
        ((r // 2) + (c // 2)) % 2,  # checkerboard
        np.full((side, side), 0.5),  # solid
        ((r + c) // 2) % 2,  # diagonal stripes
        ((r - c) // 2) % 2,  # anti-diagonal stripes
        (np.abs(r - mid) < side / 4) & (np.abs(c - mid) < side / 4),  # centered square
        (np.abs(r - mid) < 1.5) | (np.abs(c - mid) < 1.5),  # cross
        (rad > side / 5) & (rad < side / 2.5),  # ring
        c / (side - 1),  # ramp
    ]
    return [p.astype(np.float64) for p in pats]


N_TEMPLATES = 10


@dataclass
class SyntheticSpec:
    classes: int = 4
    side: int = 16
    noise_sigma: float = 0.3
    samples_per_class: int = 500
    seed: int = 0
    channels: int = 3

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError(f"synthetic data needs at least 2 classes, got {self.classes}")
        if self.classes > N_TEMPLATES:
            raise ValueError(f"only {N_TEMPLATES} pattern templates exist, {self.classes} classes requested")
        if self.side < 8:
            raise ValueError(f"side must be at least 8, got {self.side}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")


def render_synthetic(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noisy pattern images in pixel units (roughly [0, 1]), shuffled by seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    temps = _templates(spec.side)
    n = spec.classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    base = np.stack([temps[c] for c in labels])[:, None].repeat(spec.channels, axis=1)
    images = base + spec.noise_sigma * rng.standard_normal(base.shape)
    perm = rng.permutation(n)
    return images[perm], labels[perm].astype(np.int64)


def gen_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic 80/20 train/test pattern datasets, standardized on the train part."""
    images, labels = render_synthetic(spec)
    n_train = int(round(0.8 * len(labels)))
    mean, std = channel_stats(images[:n_train])
    train = Dataset(images[:n_train], labels[:n_train], spec.classes, mean, std)
    test = Dataset(images[n_train:], labels[n_train:], spec.classes, mean, std)
    return train, test


def write_synthetic_cifar10(dir_path: str, noise_sigma: float = 0.3, seed: int = 0) -> None:
    """Dump a 10-class 32x32 synthetic set in the CIFAR-10 binary layout (50000/10000).

    Each of the six files is rendered separately (1000 images per class, seeded by
    ``(seed, file index)``) to keep peak memory near one file's worth of floats.
    """
    os.makedirs(dir_path, exist_ok=True)
    for i, name in enumerate(TRAIN_FILES + (TEST_FILE,)):
        spec = SyntheticSpec(classes=10, side=32, noise_sigma=noise_sigma, samples_per_class=1000, seed=seed * 7 + i)
        images, labels = render_synthetic(spec)
        pix = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
        del images
        with open(os.path.join(dir_path, name), "wb") as fh:
            fh.write(encode_cifar_records(labels, pix))


# ----------------------------------------------------------------------------
# batching and augmentation
# ----------------------------------------------------------------------------


def augment_flip(batch: ImageBatch, rng: np.random.Generator, p: float = 0.5) -> ImageBatch:
    """Mirror each image horizontally with probability ``p``."""
    flip = rng.random(len(batch)) < p
    data = batch.images.data.copy()
    data[flip] = data[flip][..., ::-1]
    return ImageBatch(Tensor(data), batch.labels)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[ImageBatch]:
    """Seeded shuffle for one epoch; the last batch may be short."""
    if len(dataset) == 0:
        raise ValueError("cannot iterate over an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield dataset.batch(order[start : start + batch_size])


def split_dataset(train_set: Dataset, val_size: int, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint (weight-train, alpha-val) partition; validation drawn uniformly without replacement."""
    n = len(train_set)
    if val_size > n:
        raise ValueError(f"val_size {val_size} exceeds the {n} available training samples")
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = np.sort(perm[:val_size])
    train_idx = np.sort(perm[val_size:])
    return train_set.subset(train_idx), train_set.subset(val_idx)
