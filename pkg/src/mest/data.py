"""Dataset ingestion (IDX, CIFAR-10 binary), augmentation, synthetic data."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray   # (N, C, H, W) uint8
    labels: np.ndarray   # (N,) int64
    split: str = "train"
    checksum: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError("image/label count mismatch")
        if not self.checksum:
            h = hashlib.sha256()
            h.update(self.images.tobytes())
            h.update(self.labels.tobytes())
            self.checksum = h.hexdigest()[:16]

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dims")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != int(np.prod(dims)):
        raise FormatError(f"{path}: payload size {body.size} != product of dims {dims}")
    return body.reshape(dims)


def load_idx(images_path, labels_path, split="train"):
    """Load a big-endian IDX image/label file pair."""
    images = _read_idx(images_path, IDX_MAGIC_IMAGES)
    labels = _read_idx(labels_path, IDX_MAGIC_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise FormatError("IDX image/label counts differ")
    return LabeledDataset(images[:, None, :, :].copy(), labels.astype(np.int64), split)


def write_idx(images, labels, images_path, labels_path):
    """Emit (N, H, W) uint8 images and labels in IDX layout (test fixtures)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, n))
        fh.write(labels.tobytes())


CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels


def load_cifar10(paths, split="train"):
    """Load one or more CIFAR-10 binary batch files."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(raw)} not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        batch_labels = records[:, 0].astype(np.int64)
        if batch_labels.size and batch_labels.max() >= 10:
            raise FormatError(f"{path}: label {batch_labels.max()} out of range")
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(batch_labels)
    return LabeledDataset(np.concatenate(images), np.concatenate(labels), split)


def augment(images, rng, pad=4, flip=True):
    """Pad-and-random-crop plus horizontal flip, deterministic per rng state."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    do_flip = rng.integers(0, 2, size=n).astype(bool) if flip \
        else np.zeros(n, dtype=bool)
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if do_flip[i] else crop
    return out


def synth(num, classes=2, seed=0, size=8, spread=0.35):
    """Separable Gaussian-blob images for fast deterministic runs.

    Each class places its blob at a distinct location; classes are balanced
    (class i gets ceil/floor share of ``num``).
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(num) % classes
    centers = [(int(size * 0.25 + (size * 0.5) * (i % 2)),
                int(size * 0.25 + (size * 0.5) * ((i // 2) % 2)))
               for i in range(classes)]
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((num, 1, size, size), dtype=np.uint8)
    for i in range(num):
        cy, cx = centers[labels[i]]
        cy = cy + rng.normal(0, spread)
        cx = cx + rng.normal(0, spread)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.2 ** 2)))
        noise = rng.normal(0, 0.05, size=(size, size))
        images[i, 0] = np.clip((blob + noise) * 255, 0, 255).astype(np.uint8)
    return LabeledDataset(images, labels.astype(np.int64), "synth")


def normalization_stats(dataset):
    """Per-channel mean/std of the train split, in [0, 1] pixel scale."""
    x = dataset.images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean, std


def normalize(images, mean, std, dtype=np.float64):
    x = images.astype(dtype) / 255.0
    return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(dtype)
