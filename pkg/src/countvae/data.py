"""Datasets: MNIST from IDX files, synthetic bars, batching and probe splits."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dist import RngStream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, D) float64 in [0, 1]
    labels: np.ndarray          # (N,) int64
    source: str
    image_shape: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError(f"images must be (N, D), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not self.image_shape:
            self.image_shape = (self.images.shape[1],)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.images.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        meta = dict(self.meta)
        if tag:
            meta["subset"] = tag
        return Dataset(self.images[idx], self.labels[idx], self.source, self.image_shape, meta)


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an integer array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: unsupported IDX type code 0x{magic >> 8:02x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise IdxFormatError(f"{path}: truncated payload, need {n} bytes, have {len(raw) - head}")
    if len(raw) - head > n:
        raise IdxFormatError(f"{path}: {len(raw) - head - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("write_idx only writes unsigned-byte arrays")
    header = struct.pack(">I", (0x08 << 8) | array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"count mismatch: {len(images)} images in {images_path}, "
            f"{len(labels)} labels in {labels_path}")
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), "mnist", tuple(images.shape[1:]),
                   {"images": os.fspath(images_path), "labels": os.fspath(labels_path)})


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    pix = np.rint(dataset.images * 255.0).astype(np.uint8)
    write_idx(images_path, pix.reshape((len(dataset),) + tuple(dataset.image_shape)))
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def _find(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = data_dir / name
        if p.exists():
            return p
    raise FileNotFoundError(f"no {stem}[.gz] under {data_dir}")


def load_mnist(data_dir, split: str = "train") -> Dataset:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory {data_dir} does not exist")
    img, lab = MNIST_FILES[split]
    ds = load_idx(_find(data_dir, img), _find(data_dir, lab))
    ds.meta["split"] = split
    return ds


def synth_bars(n: int, side: int, rng: RngStream) -> Dataset:
    """Binary images with 1-3 distinct horizontal/vertical bars; label = bars - 1."""
    if side < 4:
        raise ValueError(f"side must be at least 4, got {side}")
    counts = rng.integers(1, 4, size=n)
    images = np.zeros((n, side, side))
    for i, k in enumerate(counts):
        for line in rng.choice(2 * side, int(k)):
            if line < side:
                images[i, line, :] = 1.0
            else:
                images[i, :, line - side] = 1.0
    return Dataset(images.reshape(n, -1), counts - 1, "synth_bars", (side, side),
                   {"n": n, "side": side, "seed": rng.seed, "stream": list(rng.path)})


def subsample(dataset: Dataset, n: int, rng: RngStream) -> Dataset:
    if n >= len(dataset):
        return dataset
    idx = np.sort(rng.choice(len(dataset), n))
    return dataset.subset(idx, f"subsample-{n}")


def batch_indices(n: int, batch_size: int, rng: RngStream | None = None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def split_and_batch(dataset: Dataset, batch_size: int, seed: int,
                    epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield shuffled (images, labels) batches for one epoch; the last batch may be short."""
    rng = RngStream(seed).child("batches").child(epoch)
    for idx in batch_indices(len(dataset), batch_size, rng):
        yield dataset.images[idx], dataset.labels[idx]


def probe_split(n: int, rng: RngStream, half: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two disjoint random index sets of size ``half`` (default n // 2)."""
    half = n // 2 if half is None else half
    if 2 * half > n:
        raise ValueError(f"cannot draw two disjoint halves of {half} from {n} samples")
    perm = rng.permutation(n)
    a, b = np.sort(perm[:half]), np.sort(perm[half:2 * half])
    assert not np.intersect1d(a, b).size
    return a, b
