"""Datasets: seeded synthetic image blobs and the CIFAR-10 binary format."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["DatasetHandle", "make_synthetic", "load_cifar10", "train_test_split", "CIFAR_RECORD"]

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class DatasetHandle:
    x: np.ndarray  # (N, C, H, W) float32, standardized
    y: np.ndarray  # (N,) int64
    class_count: int
    mean: np.ndarray  # per-channel mean of the [0, 1] pixels
    std: np.ndarray

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "DatasetHandle":
        return DatasetHandle(self.x[idx], self.y[idx], self.class_count, self.mean, self.std)


def _standardize(pixels: np.ndarray):
    mean = pixels.mean(axis=(0, 2, 3))
    std = pixels.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    x = (pixels - mean[None, :, None, None]) / std[None, :, None, None]
    return x.astype(np.float32), mean, std


def make_synthetic(n: int, classes: int = 10, dims=(3, 8, 8), difficulty: float = 1.0,
                   seed: int = 0) -> DatasetHandle:
    """Image-like class blobs.

    Each class has a random prototype image. A sample is
    ``sigmoid(prototype + difficulty * noise)`` with standard-normal noise, so
    pixels lie in (0, 1) before standardization. Larger ``difficulty`` means
    more overlap between classes. Labels are balanced and shuffled.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n < classes:
        raise ValueError(f"n={n} is smaller than classes={classes}")
    if difficulty < 0:
        raise ValueError("difficulty must be >= 0")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be (C, H, W), got {dims}")
    rng = np.random.Generator(np.random.PCG64(seed))
    protos = rng.standard_normal((classes, *dims)) * 1.5
    y = rng.permutation(np.arange(n) % classes)
    z = protos[y] + difficulty * rng.standard_normal((n, *dims))
    pixels = 1.0 / (1.0 + np.exp(-z))
    x, mean, std = _standardize(pixels)
    return DatasetHandle(x, y.astype(np.int64), classes, mean, std)


def train_test_split(data: DatasetHandle, n_test: int, seed: int = 0):
    if not 0 < n_test < len(data):
        raise ValueError(f"n_test must be in (0, {len(data)})")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(data))
    return data.subset(order[n_test:]), data.subset(order[:n_test])


def _parse_cifar(blob: bytes, name: str):
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        n = max(1, round(len(blob) / CIFAR_RECORD))
        raise ValueError(
            f"{name}: expected a multiple of {CIFAR_RECORD} bytes "
            f"(e.g. {n * CIFAR_RECORD}), got {len(blob)}"
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{name}: label {labels[i]} > 9 at byte offset {i * CIFAR_RECORD}")
    return raw[:, 1:].reshape(-1, 3, 32, 32), labels.astype(np.int64)


def load_cifar10(path, subset_size: int | None = None, seed: int = 0) -> DatasetHandle:
    """Read CIFAR-10 binary batches.

    ``path`` is a single ``.bin`` file or a directory, in which case every
    ``*.bin`` file in it is read in sorted order. Each record is one label byte
    followed by 3072 pixel bytes in CHW order.
    """
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no .bin files under {path}")
    images, labels = [], []
    for f in files:
        img, lab = _parse_cifar(f.read_bytes(), os.fspath(f))
        images.append(img)
        labels.append(lab)
    img = np.concatenate(images)
    lab = np.concatenate(labels)
    if subset_size is not None and subset_size < len(lab):
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = np.sort(rng.choice(len(lab), size=subset_size, replace=False))
        img, lab = img[idx], lab[idx]
    x, mean, std = _standardize(img.astype(np.float64) / 255.0)
    return DatasetHandle(x, lab, 10, mean, std)
