"""Datasets: a synthetic shapes generator with known ground truth, and IDX files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # (N, H, W)
    labels: np.ndarray            # (N,)
    value_range: tuple = (0.0, 1.0)
    masks: np.ndarray | None = None   # (N, H, W) ground-truth, binary

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.value_range,
                       None if self.masks is None else self.masks[idx])

    def validate(self, n_classes: int):
        lo, hi = self.value_range
        if self.labels.min() < 0 or self.labels.max() >= n_classes:
            raise DataError(f"labels outside [0, {n_classes})")
        if self.images.min() < lo or self.images.max() > hi:
            raise DataError(f"pixel values outside {self.value_range}")

    @property
    def mean_value(self) -> float:
        return float(self.images.mean())


def _square(rng, side):
    s = int(rng.integers(3, 7))
    r, c = rng.integers(0, side - s + 1, size=2)
    m = np.zeros((side, side), bool)
    m[r:r + s, c:c + s] = True
    return m


def _cross(rng, side):
    s = int(rng.choice([5, 7, 9]))
    r, c = rng.integers(0, side - s + 1, size=2)
    m = np.zeros((side, side), bool)
    mid = s // 2
    m[r + mid, c:c + s] = True
    m[r:r + s, c + mid] = True
    return m


def synthetic_shapes(n: int, seed: int, side: int = 16, noise: float = 0.1) -> Dataset:
    """Filled squares (class 0) and plus-shaped crosses (class 1).

    Background is Normal(0, noise) clipped to [0, 1]; shape pixels get a
    random intensity in [0.6, 1.0]. ``masks`` marks the shape pixels.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, side, side))
    masks = np.empty((n, side, side))
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        m = _square(rng, side) if labels[i] == 0 else _cross(rng, side)
        img = np.clip(rng.normal(0.0, noise, size=(side, side)), 0.0, 1.0)
        img[m] = rng.uniform(0.6, 1.0)
        images[i], masks[i] = img, m
    return Dataset(images, labels.astype(np.int64), (0.0, 1.0), masks)


def _read_header(data: bytes, magic: int, ndim: int):
    if len(data) < 4 + 4 * ndim:
        raise DataError("IDX file truncated in header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise DataError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    body = data[4 + 4 * ndim:]
    if len(body) < int(np.prod(dims)):
        raise DataError(f"IDX file truncated: {len(body)} bytes for dims {dims}")
    return dims, body


def load_idx_images(path) -> np.ndarray:
    dims, body = _read_header(Path(path).read_bytes(), IDX_IMAGES, 3)
    raw = np.frombuffer(body, dtype=np.uint8, count=int(np.prod(dims)))
    return raw.reshape(dims).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    (n,), body = _read_header(Path(path).read_bytes(), IDX_LABELS, 1)
    return np.frombuffer(body, dtype=np.uint8, count=n).astype(np.int64)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read IDX image (and optionally label) files; pixels rescaled to [0, 1]."""
    images = load_idx_images(images_path)
    labels = np.zeros(len(images), np.int64) if labels_path is None else load_idx_labels(labels_path)
    if len(labels) != len(images):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images, labels)


def write_idx(dataset: Dataset, images_path, labels_path=None) -> None:
    """Write images quantized to 8 bits (and labels) in IDX format."""
    q = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, *q.shape) + q.tobytes())
    if labels_path is not None:
        lab = dataset.labels.astype(np.uint8)
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, len(lab)) + lab.tobytes())
