"""Dataset loading and input-shape adaptation.

Images are float32 in [0, 1], channel-first (N, C, H, W); labels int64.
IDX files may be plain or gzip-compressed (sniffed from the first two
bytes). Canonical shapes: mnist 1x28x28, cifar10 3x32x32.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

CANONICAL_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}
NUM_CLASSES = 10

_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes


class DataError(ValueError):
    """Unreadable or inconsistent dataset files."""


@dataclass
class Dataset:
    name: str
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images vs "
                            f"{self.labels.shape[0]} labels")
        if self.images.dtype != np.float32:
            raise DataError(f"images must be float32, got {self.images.dtype}")
        if self.labels.size and not (0 <= int(self.labels.min())
                                     and int(self.labels.max()) < NUM_CLASSES):
            raise DataError(f"labels must lie in [0, {NUM_CLASSES - 1}]")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int, start: int = 0) -> "Dataset":
        if start < 0 or start + n > self.n:
            raise DataError(f"subset [{start}, {start + n}) out of range for "
                            f"{self.n} samples")
        return Dataset(self.name, self.images[start:start + n],
                       self.labels[start:start + n])


def _read_maybe_gzip(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _parse_idx(blob: bytes, path, expect_magic: int, ndim: int):
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != expect_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected "
                        f"0x{expect_magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    body = blob[header:]
    if len(body) != count:
        raise DataError(f"{path}: payload holds {len(body)} bytes, header "
                        f"declares {count}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair (plain or .gz)."""
    raw_images = _parse_idx(_read_maybe_gzip(images_path), images_path,
                            expect_magic=0x803, ndim=3)
    raw_labels = _parse_idx(_read_maybe_gzip(labels_path), labels_path,
                            expect_magic=0x801, ndim=1)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise DataError(f"{images_path} holds {raw_images.shape[0]} images but "
                        f"{labels_path} holds {raw_labels.shape[0]} labels")
    n, h, w = raw_images.shape
    images = (raw_images.reshape(n, 1, h, w).astype(np.float32)) / 255.0
    return Dataset("mnist", images, raw_labels.astype(np.int64))


def load_cifar10(batch_paths) -> Dataset:
    """Read one or more CIFAR-10 binary batches (plain or .gz)."""
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    if not batch_paths:
        raise DataError("no CIFAR-10 batch files given")
    image_parts, label_parts = [], []
    for path in batch_paths:
        blob = _read_maybe_gzip(path)
        if len(blob) == 0 or len(blob) % _CIFAR_RECORD:
            raise DataError(f"{path}: size {len(blob)} is not a multiple of the "
                            f"{_CIFAR_RECORD}-byte record")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        label_parts.append(records[:, 0].astype(np.int64))
        image_parts.append(records[:, 1:].reshape(-1, 3, 32, 32))
    labels = np.concatenate(label_parts)
    if labels.size and int(labels.max()) >= NUM_CLASSES:
        raise DataError(f"label {int(labels.max())} out of range; corrupt batch?")
    images = np.concatenate(image_parts).astype(np.float32) / 255.0
    return Dataset("cifar10", images, labels)


def adapt_input(images: np.ndarray, target_shape: tuple[int, int, int]) -> np.ndarray:
    """Convert a batch between supported input shapes.

    Channels: 1 -> 3 replicates, 3 -> 1 averages. Spatial: grow by a
    symmetric zero pad, shrink by a center crop (square sizes only). Values
    stay in [0, 1]; pad-then-crop round trips are lossless.
    """
    if images.ndim != 4:
        raise DataError(f"expected (N, C, H, W) batch, got shape {images.shape}")
    c, h, w = images.shape[1:]
    tc, th, tw = target_shape
    if h != w or th != tw:
        raise DataError(f"only square images are supported, got {h}x{w} -> {th}x{tw}")
    out = images
    if c != tc:
        if (c, tc) == (1, 3):
            out = np.repeat(out, 3, axis=1)
        elif (c, tc) == (3, 1):
            out = out.mean(axis=1, keepdims=True, dtype=np.float32)
        else:
            raise DataError(f"unsupported channel conversion {c} -> {tc}")
    if h != th:
        if th > h:
            lo = (th - h) // 2
            hi = th - h - lo
            out = np.pad(out, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
        else:
            lo = (h - th) // 2
            out = out[:, :, lo:lo + th, lo:lo + th]
    return np.ascontiguousarray(out, dtype=np.float32)


def adapt_dataset(ds: Dataset, target_shape: tuple[int, int, int]) -> Dataset:
    if ds.shape == tuple(target_shape):
        return ds
    return Dataset(ds.name, adapt_input(ds.images, target_shape), ds.labels)
