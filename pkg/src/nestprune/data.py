"""Dataset loaders (IDX, CIFAR binary, synthetic blobs) and seeded batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read one IDX file (big-endian header, any element type)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise DataError(f"{path}: bad IDX magic")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[4 + 4 * ndim:]
    if len(body) != expected:
        raise DataError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used for fixtures and conversions)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError("only uint8 IDX writing is supported")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim not in (3, 4) or labels.ndim != 1:
        raise DataError("expected (N, H, W) images and (N,) labels")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), num_classes)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(paths, num_classes: int = 10) -> Dataset:
    """CIFAR-10 binary batches: records of 1 label byte + 3x32x32 planes."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        with _open(p) as fh:
            raw = fh.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataError(f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images).astype(np.float64) / 255.0, np.concatenate(labels),
                   num_classes)


def synthetic_blobs(classes: int, per_class: int, dim: int, seed: int = 0,
                    separation: float = 8.0, spread: float = 1.0) -> Dataset:
    """Gaussian blobs around random class centres, shaped ``(N, 1, 1, dim)``."""
    if classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("classes, per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(classes, dim))
    centres *= separation / np.maximum(np.linalg.norm(centres, axis=1, keepdims=True), 1e-12)
    labels = np.repeat(np.arange(classes), per_class)
    x = centres[labels] + spread * rng.normal(size=(len(labels), dim))
    return Dataset(x.reshape(len(labels), 1, 1, dim), labels, classes)


def batch_iterator(n: int, batch_size: int, shuffle_seed: int | None = 0):
    """Yield index arrays covering ``range(n)`` once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def stratified_split(labels: np.ndarray, test_per_class: int, seed: int = 0):
    """Train/test index arrays with ``test_per_class`` test items of every class."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.append(idx[:test_per_class])
        train.append(idx[test_per_class:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def load_mnist(directory=None, test_per_class: int = 100, seed: int = 0) -> tuple[Dataset, Dataset]:
    """MNIST as ``(train, test)``.

    Uses the four official IDX files from ``directory`` (or ``$MNIST_DIR``)
    when present; otherwise the 5000-image MNIST sample bundled with
    ``mlxtend``, split stratified with ``test_per_class`` test images per digit.
    """
    directory = directory or os.environ.get("MNIST_DIR")
    if directory:
        d = Path(directory)
        names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        found = []
        for n in names:
            cands = [d / n, d / (n + ".gz")]
            hit = next((c for c in cands if c.exists()), None)
            if hit is None:
                raise DataError(f"{n}[.gz] not found in {d}")
            found.append(hit)
        return load_idx(found[0], found[1]), load_idx(found[2], found[3])
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DataError("no MNIST source: set MNIST_DIR to the IDX files or install mlxtend") from exc
    x, y = mnist_data()
    full = Dataset(x.reshape(-1, 1, 28, 28) / 255.0, y.astype(np.int64), 10)
    tr, te = stratified_split(full.labels, test_per_class, seed)
    return full.subset(tr), full.subset(te)
