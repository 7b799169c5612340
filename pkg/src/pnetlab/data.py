"""Dataset readers: MNIST IDX, CIFAR-10 binary batches, PPM/PGM folders.

All loaders return ``(images, labels)`` with images float64 in [0, 1],
channels-last ``(N, H, W, C)``, and labels int64.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "PNETLAB_DATA_ROOT"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _read_bytes(path: Path) -> bytes:
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx_images(path) -> np.ndarray:
    buf = _read_bytes(Path(path))
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated IDX header", len(buf))
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad IDX image magic 0x{magic:08x}", 0)
    need = 16 + n * rows * cols
    if len(buf) < need:
        raise FormatError(f"{path}: truncated, expected {need} bytes", len(buf))
    pix = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pix.reshape(n, rows, cols, 1).astype(np.float64) / 255.0


def read_idx_labels(path, n_classes: int = 10) -> np.ndarray:
    buf = _read_bytes(Path(path))
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated IDX header", len(buf))
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad IDX label magic 0x{magic:08x}", 0)
    if len(buf) < 8 + n:
        raise FormatError(f"{path}: truncated, expected {8 + n} bytes", len(buf))
    labels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range 0-{n_classes - 1}", 8 + int(bad[0]))
    return labels


def load_mnist(path, split: str = "train"):
    """Read the IDX pair for ``split`` ("train" or "test") from directory ``path``."""
    img_name, lbl_name = _MNIST_FILES[split]
    path = Path(path)
    images = read_idx_images(path / img_name)
    labels = read_idx_labels(path / lbl_name)
    if len(images) != len(labels):
        raise FormatError(f"{path}: {len(images)} images but {len(labels)} labels")
    return images, labels


def read_cifar10_batch(path):
    buf = _read_bytes(Path(path))
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}", len(buf) - len(buf) % CIFAR_RECORD)
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        i = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label {labels[i]} out of range", i * CIFAR_RECORD)
    # planar R,G,B 32x32 planes -> channels-last
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(path, split: str = "train"):
    """Load one batch file, or all batches of ``split`` from a directory."""
    path = Path(path)
    if path.is_file():
        return read_cifar10_batch(path)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [read_cifar10_batch(path / n) for n in names if (path / n).exists()]
    if not parts:
        raise FormatError(f"{path}: no CIFAR-10 {split} batch files found")
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def load_image_dir(path, size: int, channels: int = 3):
    """Class-per-subdirectory folder of PPM/PGM images.

    Subdirectories are sorted by name to assign class indices.  Images are
    resized nearest-neighbour to ``size x size``; grayscale images are
    replicated across ``channels``.  Unreadable files are skipped with a
    warning.  Returns ``(images, labels, class_names, n_skipped)``.
    """
    from PIL import Image

    path = Path(path)
    classes = sorted(p.name for p in path.iterdir() if p.is_dir()) if path.is_dir() else []
    images, labels, skipped = [], [], 0
    for label, name in enumerate(classes):
        for f in sorted((path / name).iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("L" if channels == 1 else "RGB") if im.mode not in ("L",) else im
                    im = im.resize((size, size), Image.NEAREST)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except Exception as e:  # PIL raises a zoo of exception types
                log.warning("skipping unreadable image %s: %s", f, e)
                skipped += 1
                continue
            if arr.ndim == 2:
                arr = np.repeat(arr[:, :, None], channels, axis=2)
            elif channels == 1:
                arr = arr.mean(axis=2, keepdims=True)
            images.append(arr)
            labels.append(label)
    if not images:
        log.warning("no images found under %s", path)
        return np.zeros((0, size, size, channels)), np.zeros(0, dtype=np.int64), classes, skipped
    return np.stack(images), np.asarray(labels, dtype=np.int64), classes, skipped
