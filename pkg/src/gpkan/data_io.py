"""Dataset ingestion: IDX files (MNIST), the toy regression set, splits.

IDX layout: a big-endian 32-bit magic ``0x0000TTDD`` (type code 0x08 for
unsigned bytes, DD the number of dimensions), then DD big-endian 32-bit
sizes, then the payload.  Files ending in ``.gz`` are read through gzip.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .training import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MAX_ELEMENTS = 2**31 - 1


class IDXError(ValueError):
    """Base class for malformed IDX input."""


class BadMagic(IDXError):
    pass


class TruncatedPayload(IDXError):
    pass


class DimensionOverflow(IDXError):
    """Declared sizes are not representable, or the payload outgrows them."""


class SplitError(ValueError):
    pass


def _open(path, mode):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def parse_idx(raw: bytes, expected_magic):
    """Decode an unsigned-byte IDX buffer into a uint8 array."""
    if len(raw) < 4:
        raise TruncatedPayload(f"need a 4-byte magic, got {len(raw)} bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagic(f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedPayload(f"header needs {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimensionOverflow(f"dimensions {dims} declare {count} elements")
    have = len(raw) - header
    if have < count:
        raise TruncatedPayload(f"payload has {have} bytes, dimensions {dims} need {count}")
    if have > count:
        raise DimensionOverflow(f"payload has {have} bytes, dimensions {dims} only hold {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(path, expected_magic):
    with _open(path, "rb") as fh:
        return parse_idx(fh.read(), expected_magic)


def encode_idx(data, magic=None):
    data = np.asarray(data)
    if data.dtype != np.uint8:
        raise TypeError(f"IDX payload must be uint8, got {data.dtype}")
    magic = (0x0800 | data.ndim) if magic is None else magic
    return struct.pack(f">I{data.ndim}I", magic, *data.shape) + data.tobytes()


def write_idx(path, data, magic=None):
    with _open(path, "wb") as fh:
        fh.write(encode_idx(data, magic))


def load_idx_images(path):
    """(N, H, W) float64 pixels in [0, 1]."""
    raw = read_idx(path, IMAGES_MAGIC)
    return raw.astype(np.float64) / 255.0


def load_idx_labels(path):
    return read_idx(path, LABELS_MAGIC).astype(np.int64)


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledImageSet(self.images[idx], self.labels[idx])

    def to_dataset(self, n_classes=10):
        return Dataset(self.images, one_hot(self.labels, n_classes), self.labels)


def load_mnist(images_path, labels_path):
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    return LabeledImageSet(images[:, None], labels)


def one_hot(labels, n_classes=10):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass(frozen=True)
class ToyRegressionSet:
    inputs: np.ndarray  # (N, 2)
    targets: np.ndarray  # (N,)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx):
        return ToyRegressionSet(self.inputs[idx], self.targets[idx])

    def to_dataset(self):
        return Dataset(self.inputs, self.targets[:, None])


def toy_target(x1, x2):
    return np.exp(np.sin(np.pi * np.asarray(x1)) + np.asarray(x2) ** 2)


def toy_dataset(n, seed):
    """n noiseless samples of exp(sin(pi x1) + x2^2) on [-0.5, 0.5]^2."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x = np.random.default_rng(seed).uniform(-0.5, 0.5, size=(n, 2))
    return ToyRegressionSet(x, toy_target(x[:, 0], x[:, 1]))


def split(pool, sizes, seed, test_set=None):
    """Carve (train, val, test) with a seeded shuffle of ``pool``.

    When ``test_set`` is given the test part is its first ``sizes[2]``
    items in file order and ``pool`` only feeds train and val.
    """
    n_train, n_val, n_test = (int(k) for k in sizes)
    if min(n_train, n_val, n_test) < 0:
        raise SplitError(f"sizes must be non-negative, got {sizes}")
    from_pool = n_train + n_val + (0 if test_set is not None else n_test)
    if from_pool > len(pool):
        raise SplitError(f"sizes {sizes} need {from_pool} items, pool has {len(pool)}")
    if test_set is not None and n_test > len(test_set):
        raise SplitError(f"test size {n_test} exceeds test set of {len(test_set)}")
    order = np.random.default_rng(seed).permutation(len(pool))
    train = pool.subset(order[:n_train])
    val = pool.subset(order[n_train:n_train + n_val])
    if test_set is not None:
        test = test_set.subset(np.arange(n_test))
    else:
        test = pool.subset(order[n_train + n_val:n_train + n_val + n_test])
    return train, val, test
