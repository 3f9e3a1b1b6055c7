"""CIFAR-10 binary batch ingestion and grayscale conversion.

Each record is 3073 bytes: one label byte then 1024 red, 1024 green and
1024 blue bytes, each plane row-major 32x32. Batch files in a directory are
read in lexicographic filename order, so the result does not depend on how
the filesystem lists them.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidArgument

RECORD_BYTES = 3073
SIDE = 32
GRAY_MODES = ("green", "luma601")
LUMA601 = (0.299, 0.587, 0.114)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, 32, 32) in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, 10)
    split: str

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.images[:n], self.labels[:n], self.split)


def to_grayscale(rgb, mode: str = "green"):
    """Grayscale from RGB values in [0, 1]; the last axis holds (R, G, B)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if mode == "green":
        return rgb[..., 1]
    if mode == "luma601":
        return rgb @ np.asarray(LUMA601)
    raise InvalidArgument(f"unknown grayscale mode {mode!r}; choose from {GRAY_MODES}")


def decode_records(raw: bytes, mode: str = "green", name: str = "<bytes>", dtype=np.float32):
    """Decode concatenated 3073-byte records into (images, labels)."""
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"{name}: length {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{name}: record {bad[0]} has label byte {labels[bad[0]]} > 9")
    planes = rec[:, 1:].reshape(-1, 3, SIDE, SIDE).transpose(0, 2, 3, 1) / 255.0
    gray = to_grayscale(planes, mode)
    return gray[:, None].astype(dtype), labels


def batch_files(path: str, split: str) -> list[str]:
    if os.path.isfile(path):
        return [path]
    pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
    files = sorted(glob.glob(os.path.join(path, pattern)))
    if not files:
        nested = os.path.join(path, "cifar-10-batches-bin")
        if os.path.isdir(nested):
            return batch_files(nested, split)
        raise FormatError(f"no CIFAR-10 {split} batches ({pattern}) under {path}")
    return files


def load_cifar10(path: str, split: str = "train", mode: str = "green", limit: int | None = None) -> Dataset:
    """Load a CIFAR-10 split from a directory of binary batches (or one file).

    ``limit`` keeps the first ``limit`` records in file order.
    """
    if split not in ("train", "test"):
        raise InvalidArgument(f"split must be 'train' or 'test', got {split!r}")
    images, labels = [], []
    for f in batch_files(path, split):
        with open(f, "rb") as fh:
            raw = fh.read()
        x, y = decode_records(raw, mode, name=f)
        images.append(x)
        labels.append(y)
    ds = Dataset(np.concatenate(images), np.concatenate(labels), split)
    return ds.subset(limit)


def find_cifar10(explicit: str | None = None) -> str | None:
    """Resolve a dataset location from an explicit path or ``CIFAR10_DIR``."""
    for cand in (explicit, os.environ.get("CIFAR10_DIR")):
        if cand and os.path.exists(cand):
            return cand
    return None


def synthetic_dataset(n: int, classes: int = 10, side: int = SIDE, seed: int = 0, split: str = "synthetic") -> Dataset:
    """Class-conditional oriented-grating images for smoke runs without real data."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n)
    yy, xx = np.mgrid[0:side, 0:side] / side
    theta = np.pi * labels / classes
    freq = 2.0 + (labels % 3)
    phase = rng.uniform(0, 2 * np.pi, n)
    arg = 2 * np.pi * freq[:, None, None] * (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    img = 0.5 + 0.35 * np.sin(arg + phase[:, None, None]) + 0.1 * rng.standard_normal((n, side, side))
    return Dataset(np.clip(img, 0, 1)[:, None].astype(np.float32), labels.astype(np.int64), split)
