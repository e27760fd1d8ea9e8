"""Readers for the MNIST-family IDX files and the CIFAR binary batches.

Every parser takes raw bytes and checks lengths exactly. Pixels are scaled by
1/255 and images are flattened in file order (row-major for IDX, channel-major
for CIFAR).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mal import rng
from mal.errors import ConfigError, FormatError, LengthError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_PIXELS = 3072

# dataset name -> (subdirectory, class count)
DATASETS = {
    "mnist": ("mnist", 10),
    "fashion_mnist": ("fashion_mnist", 10),
    "cifar10": ("cifar-10-batches-bin", 10),
    "cifar100": ("cifar-100-binary", 100),
}


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or len(features) != len(labels):
            raise FormatError(f"features {features.shape} do not match {len(labels)} labels")
        if len(labels) == 0:
            raise ConfigError(f"dataset {self.name!r} is empty")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ConfigError(f"labels of {self.name!r} fall outside [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.labels)

    def take(self, idx, name=None) -> "Dataset":
        return Dataset(name or self.name, self.features[idx], self.labels[idx], self.num_classes)


def _maybe_gunzip(raw: bytes) -> bytes:
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _read_idx(raw: bytes, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise LengthError(f"IDX header needs {head} bytes, got {len(raw)}")
    found, = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"bad IDX magic {found}, expected {magic}")
    dims = struct.unpack(f">{ndims}I", raw[4:head])
    need = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) != need:
        raise LengthError(f"IDX payload length {len(raw)} bytes, expected exactly {need}")
    return dims, raw[head:]


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Images as an ``N x rows*cols`` float32 matrix in [0, 1]."""
    (n, rows, cols), body = _read_idx(raw, IDX_IMAGES_MAGIC, 3)
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(np.float32) / np.float32(255.0)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    (n,), body = _read_idx(raw, IDX_LABELS_MAGIC, 1)
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def _cifar_records(raw: bytes, record: int, name: str) -> np.ndarray:
    rem = len(raw) % record
    if rem or not raw:
        raise FormatError(f"{name} stream of {len(raw)} bytes is not a multiple of {record} (remainder {rem})")
    return np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)


def parse_cifar10(raw: bytes, name: str = "cifar10") -> Dataset:
    rec = _cifar_records(raw, 1 + CIFAR_PIXELS, "CIFAR-10")
    feats = rec[:, 1:].astype(np.float32) / np.float32(255.0)
    return Dataset(name, feats, rec[:, 0].astype(np.int64), 10)


def parse_cifar100(raw: bytes, label_kind: str = "fine", name: str = "cifar100") -> Dataset:
    if label_kind not in ("coarse", "fine"):
        raise ConfigError(f"label_kind must be 'coarse' or 'fine', got {label_kind!r}")
    rec = _cifar_records(raw, 2 + CIFAR_PIXELS, "CIFAR-100")
    feats = rec[:, 2:].astype(np.float32) / np.float32(255.0)
    col, k = (0, 20) if label_kind == "coarse" else (1, 100)
    return Dataset(name, feats, rec[:, col].astype(np.int64), k)


def subsample(data: Dataset, n: int, seed: int) -> Dataset:
    """Stratified sample without replacement.

    Each class gets ``n // K`` samples and the lowest class indices take one extra
    each until ``n`` is reached. The result is ordered by original index.
    """
    k = data.num_classes
    if n > len(data):
        raise ConfigError(f"cannot draw {n} samples from {len(data)}")
    if n < k:
        raise ConfigError(f"n={n} is smaller than the class count {k}; stratification impossible")
    base, extra = divmod(n, k)
    g = rng.stream(seed, "subsample")
    picked = []
    for c in range(k):
        want = base + (1 if c < extra else 0)
        pool = np.flatnonzero(data.labels == c)
        if len(pool) < want:
            raise ConfigError(f"class {c} has {len(pool)} samples, need {want}")
        picked.append(pool[np.sort(g.permutation(len(pool))[:want])])
    idx = np.sort(np.concatenate(picked))
    return data.take(idx, name=data.name)


def _read(path: Path) -> bytes:
    for candidate in (path, path.with_name(path.name + ".gz")):
        if candidate.exists():
            return _maybe_gunzip(candidate.read_bytes())
    raise FileNotFoundError(f"missing dataset file {path}[.gz]")


def data_root(explicit=None) -> Path:
    root = explicit or os.environ.get("MAL_DATA_ROOT")
    if not root:
        raise ConfigError("no data root: pass --data-root or set MAL_DATA_ROOT")
    return Path(root)


def load_dataset(name: str, root, split: str = "train") -> Dataset:
    """Load ``train`` or ``test`` split of a named dataset from ``root/<subdir>/``.

    Expected layout, with files optionally gzip-compressed::

        mnist/ and fashion_mnist/   {train,t10k}-{images-idx3,labels-idx1}-ubyte
        cifar-10-batches-bin/       data_batch_1..5.bin, test_batch.bin
        cifar-100-binary/           train.bin, test.bin
    """
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    sub, _ = DATASETS[name]
    folder = Path(root) / sub
    if name in ("mnist", "fashion_mnist"):
        prefix = "train" if split == "train" else "t10k"
        x = parse_idx_images(_read(folder / f"{prefix}-images-idx3-ubyte"))
        y = parse_idx_labels(_read(folder / f"{prefix}-labels-idx1-ubyte"))
        if len(x) != len(y):
            raise FormatError(f"{name}/{split}: {len(x)} images but {len(y)} labels")
        return Dataset(name, x, y, 10)
    if name == "cifar10":
        files = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        return parse_cifar10(b"".join(_read(folder / f) for f in files))
    return parse_cifar100(_read(folder / ("train.bin" if split == "train" else "test.bin")))
