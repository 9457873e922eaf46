"""Loaders for the IDX (MNIST, Fashion-MNIST) and CIFAR binary formats.

Also seeded subsampling, per-subsample standardization and patch extraction
for the ViT input pipeline.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataIOError, FormatError
from .tensor import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD = 1 + 32 * 32 * 3
CIFAR100_RECORD = 2 + 32 * 32 * 3

CLASSES = {"mnist": 10, "fashion-mnist": 10, "cifar10": 10, "cifar100": 100}
EVAL_SIZES = {"mnist": 6000, "fashion-mnist": 6000, "cifar10": 5000, "cifar100": 5000}

_IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
_CIFAR_DIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


@dataclass
class DatasetHandle:
    name: str
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError("image and label counts differ")
        k = CLASSES.get(self.name)
        if k is not None and len(self.labels) and self.labels.max() >= k:
            raise FormatError(f"{self.name} labels must be < {k}")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return CLASSES.get(self.name, int(self.labels.max()) + 1)


def _read(path) -> bytes:
    try:
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError as exc:
        raise DataIOError(f"missing data file {path}") from exc


def _idx_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataIOError(f"truncated IDX header in {path}")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x} in {path}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:need])
    if len(buf) - need < int(np.prod(dims)):
        raise DataIOError(f"truncated IDX payload in {path}")
    return dims


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> DatasetHandle:
    """Parse an IDX image file (u8, 3-d) and its IDX label file (u8, 1-d)."""
    ib = _read(images_path)
    lb = _read(labels_path)
    n, rows, cols = _idx_header(ib, IDX_IMAGES_MAGIC, 3, images_path)
    (nl,) = _idx_header(lb, IDX_LABELS_MAGIC, 1, labels_path)
    if n != nl:
        raise FormatError(f"{images_path} has {n} images but {labels_path} has {nl} labels")
    images = np.frombuffer(ib, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols, 1)
    labels = np.frombuffer(lb, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return DatasetHandle(name, images.copy(), labels, split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write u8 images ``(N, H, W)`` and labels in IDX layout (test fixtures, tools)."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim == 4:
        images = images[..., 0]
    n, r, c = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes())


def load_cifar(paths, variant: str = "cifar10", split: str = "train") -> DatasetHandle:
    """Concatenate CIFAR binary batch files; CIFAR-100 keeps the fine label."""
    if variant not in ("cifar10", "cifar100"):
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    rec = CIFAR10_RECORD if variant == "cifar10" else CIFAR100_RECORD
    lab_off = rec - 3072
    imgs, labs = [], []
    for path in ([paths] if isinstance(paths, (str, os.PathLike)) else paths):
        buf = _read(path)
        if len(buf) % rec:
            raise FormatError(f"{path}: length {len(buf)} is not a multiple of the {rec}-byte record")
        arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
        labs.append(arr[:, lab_off - 1].astype(np.int64))
        imgs.append(arr[:, lab_off:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return DatasetHandle(variant, np.concatenate(imgs), np.concatenate(labs), split)


def write_cifar(path, images: np.ndarray, labels, variant: str = "cifar10", coarse=None) -> None:
    """Write ``(N, 32, 32, 3)`` u8 images in CIFAR binary layout."""
    images = np.asarray(images, dtype=np.uint8)
    planes = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    lab = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if variant == "cifar100":
        co = np.zeros_like(lab) if coarse is None else np.asarray(coarse, dtype=np.uint8).reshape(-1, 1)
        lab = np.concatenate([co, lab], axis=1)
    with open(path, "wb") as fh:
        fh.write(np.concatenate([lab, planes], axis=1).tobytes())


def load_dataset(name: str, split: str, data_dir) -> DatasetHandle:
    """Load an official split from ``data_dir`` (``<data_dir>/<name>/...``)."""
    if name not in CLASSES:
        raise ConfigError(f"unknown dataset {name!r}")
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    root = os.path.join(os.fspath(data_dir), name)
    if name in ("mnist", "fashion-mnist"):
        img, lab = _IDX_FILES[split]

        def find(base):
            for cand in (base, base + ".gz"):
                p = os.path.join(root, cand)
                if os.path.exists(p):
                    return p
            raise DataIOError(f"missing {base} under {root}")

        return load_idx(find(img), find(lab), name, split)
    sub = os.path.join(root, _CIFAR_DIRS[name])
    base = sub if os.path.isdir(sub) else root
    return load_cifar([os.path.join(base, f) for f in _CIFAR_FILES[(name, split)]], name, split)


def subsample(handle: DatasetHandle, size: int, seed: int) -> DatasetHandle:
    """Seeded shuffle of the handle, then take the first ``size`` examples."""
    if size < 1 or size > len(handle):
        raise ConfigError(f"requested {size} examples from a split of {len(handle)}")
    idx = RngStream(seed, f"subsample/{handle.name}/{handle.split}").permutation(len(handle))[:size]
    return replace(handle, images=handle.images[idx], labels=handle.labels[idx], indices=idx)


@dataclass(frozen=True)
class NormStats:
    mean: tuple
    sd: tuple


def norm_stats(handle: DatasetHandle) -> NormStats:
    x = handle.images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 1, 2))
    sd = x.std(axis=(0, 1, 2))
    sd = np.where(sd > 0, sd, 1.0)
    return NormStats(tuple(float(v) for v in mean), tuple(float(v) for v in sd))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N, (H/p)*(W/p), p*p*C)``; patches in row-major grid order."""
    n, h, w, c = images.shape
    if patch < 1 or h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(n, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, height: int, width: int, channels: int) -> np.ndarray:
    n = patches.shape[0]
    x = patches.reshape(n, height // patch, width // patch, patch, patch, channels)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, height, width, channels)


def normalize_and_patchify(handle: DatasetHandle, patch: int, stats: NormStats | None = None,
                           dtype=np.float32) -> tuple[np.ndarray, NormStats]:
    """Scale to [0, 1], standardize per channel, then cut into flattened patches.

    ``stats`` defaults to statistics of ``handle`` itself; pass the training
    subsample's statistics when transforming evaluation data.
    """
    if stats is None:
        stats = norm_stats(handle)
    x = handle.images.astype(np.float64) / 255.0
    x = (x - np.asarray(stats.mean)) / np.asarray(stats.sd)
    return patchify(x, patch).astype(dtype), stats
