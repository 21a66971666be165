"""Datasets: a seeded synthetic patch-pattern task and an IDX reader."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, S, S) float64
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (images, labels); shuffled when an rng is given, last partial batch kept."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i: i + batch_size]
            yield self.images[idx], self.labels[idx]


def synthetic_patch_task(n: int, seed: int = 0, classes: int = 10, image_side: int = 32, patch: int = 8,
                         channels: int = 3, motifs_per_class: int = 4, placed: int = 2, noise: float = 1.2,
                         task_seed: int = 1234) -> Dataset:
    """Class-conditional patch patterns on a noisy background.

    Each class owns a few random ``patch x patch`` motifs (fixed by
    ``task_seed``, so train and validation splits share them).  A sample places
    ``placed`` motifs of its class at random grid cells and fills the rest with
    Gaussian noise, so only a few patches carry the label.
    """
    g = image_side // patch
    if placed > g * g:
        raise DatasetError("more motifs than grid cells")
    task_rng = np.random.default_rng(task_seed)
    motifs = task_rng.normal(0.0, 1.0, size=(classes, motifs_per_class, channels, patch, patch))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    images = rng.normal(0.0, noise, size=(n, channels, image_side, image_side))
    for i in range(n):
        cells = rng.choice(g * g, size=placed, replace=False)
        which = rng.integers(0, motifs_per_class, size=placed)
        for c, m in zip(cells, which):
            r, col = divmod(int(c), g)
            images[i, :, r * patch:(r + 1) * patch, col * patch:(col + 1) * patch] += motifs[labels[i], m]
    return Dataset(images, labels)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (unsigned-byte payload, big-endian header)."""
    with _open(path) as f:
        head = f.read(4)
        if len(head) != 4:
            raise DatasetError(f"{path}: truncated header")
        magic = struct.unpack(">I", head)[0]
        if magic not in (IDX_IMAGES, IDX_LABELS):
            raise DatasetError(f"{path}: unsupported IDX magic 0x{magic:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: expected {int(np.prod(dims))} bytes of data, found {data.size}")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}.get(array.ndim)
    if magic is None:
        raise DatasetError("IDX writer supports 1-D labels or 3-D images")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx_dataset(images_path, labels_path, image_side: int, channels: int = 1) -> Dataset:
    """IDX images (N, H, W) scaled to [0, 1], zero-padded/cropped to ``image_side`` and tiled to ``channels``."""
    imgs = read_idx(images_path)
    labels = read_idx(labels_path)
    if imgs.ndim != 3 or labels.ndim != 1:
        raise DatasetError("expected 3-D image file and 1-D label file")
    if len(imgs) != len(labels):
        raise DatasetError("image and label counts differ")
    N, H, W = imgs.shape
    out = np.zeros((N, image_side, image_side))
    h, w = min(H, image_side), min(W, image_side)
    out[:, :h, :w] = imgs[:, :h, :w] / 255.0
    out = np.repeat(out[:, None], channels, axis=1)
    return Dataset(out, labels.astype(np.int64))
