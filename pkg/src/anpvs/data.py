"""Datasets: IDX (MNIST) files, a bundled MNIST subset and 2-D toy sets."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, ContractError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] ints
    num_classes: int = 10
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ContractError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, split or self.split, dict(self.meta))

    @property
    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images, self.labels


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if path.__str__().endswith(".gz"):
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise OSError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise OSError(f"{path}: truncated IDX payload ({len(raw) - header} of {need} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair; pixels are divided by 255."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise ConsistencyError(f"{len(images)} images vs {len(labels)} labels")
    return Dataset(images[:, None, :, :] / 255.0, labels.astype(np.int64), 10, split,
                   {"source": str(images_path)})


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IMAGE_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def synthetic_dataset(kind: str, n: int, seed: int, separation: float = 4.0, noise: float = 0.1) -> Dataset:
    """Two-class 2-D toy data rendered as 1x1x2 images in [0, 1].

    Classes alternate so any ``n >= 2`` contains both.  ``blobs`` places two
    Gaussian clusters ``separation`` standard deviations apart; ``moons`` is
    the interleaved half-circle pair.
    """
    if n < 2:
        raise ContractError("synthetic datasets need n >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    if kind == "blobs":
        centres = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
        points = centres[labels] + rng.normal(size=(n, 2))
    elif kind == "moons":
        t = rng.uniform(0.0, np.pi, n)
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        points = np.where(labels[:, None] == 0, upper, lower) + rng.normal(0.0, noise, (n, 2))
    else:
        raise ContractError(f"unknown synthetic kind {kind!r}")
    lo, hi = points.min(axis=0), points.max(axis=0)
    scaled = (points - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(scaled.reshape(n, 1, 1, 2), labels, 2, "train", {"kind": kind, "seed": seed})


def _bundled_mnist() -> tuple[np.ndarray, np.ndarray]:
    """The 5,000-image MNIST subset shipped with mlxtend (pixels 0..255).

    The bundled file is sorted by class; a fixed permutation interleaves it
    so leading slices are class-balanced.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(20190522).permutation(len(y))
    return x[order].reshape(-1, 28, 28).astype(np.uint8), y[order].astype(np.uint8)


def default_cache_dir() -> Path:
    return Path(os.environ.get("ANPVS_CACHE", Path.home() / ".cache" / "anpvs"))


def mnist_subset(n_train: int = 4000, n_test: int = 1000, cache_dir=None,
                 images_path=None, labels_path=None) -> tuple[Dataset, Dataset]:
    """Train/test split of MNIST for the desk-scale preset.

    With explicit IDX paths the first ``n_train`` images form the training
    split and the next ``n_test`` the test split.  Otherwise the bundled
    5k-image subset is written once as IDX files under ``cache_dir`` and read
    back through :func:`load_mnist_idx`.
    """
    if images_path is None:
        cache = Path(cache_dir) if cache_dir else default_cache_dir()
        images_path = cache / "mnist5k-shuffled-images-idx3-ubyte"
        labels_path = cache / "mnist5k-shuffled-labels-idx1-ubyte"
        if not (images_path.exists() and labels_path.exists()):
            cache.mkdir(parents=True, exist_ok=True)
            x, y = _bundled_mnist()
            write_idx_images(images_path, x)
            write_idx_labels(labels_path, y)
    full = load_mnist_idx(images_path, labels_path)
    if n_train + n_test > len(full):
        raise ContractError(f"requested {n_train}+{n_test} images but only {len(full)} available")
    train = full.subset(slice(0, n_train), "train")
    test = full.subset(slice(n_train, n_train + n_test), "test")
    return train, test
