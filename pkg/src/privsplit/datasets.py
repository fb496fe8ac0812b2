"""Loaders for the two benchmark image corpora and raw image export.

MNIST ships as IDX files (big-endian magic + dimension counts + raw
bytes); CIFAR-10 as fixed 3073-byte records (label byte + 3072
channel-major pixels). Loaders scale pixels to [0, 1]; writers exist so
round trips and synthetic corpora can be produced in the same formats.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, DatasetFormatError
from .tensor import Tensor

__all__ = [
    "LabeledDataset",
    "load_mnist",
    "load_cifar10",
    "write_mnist_idx",
    "write_cifar10_batch",
    "export_image_grid",
]

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 3073


@dataclass(frozen=True)
class LabeledDataset:
    """Images as a (N, C, H, W) tensor in [0, 1] plus integer labels."""

    images: Tensor
    labels: np.ndarray
    name: str

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        if self.images.rank != 4:
            raise DatasetFormatError(
                f"images must be rank 4, got {self.images.rank}")
        if self.images.shape[0] != len(labels):
            raise DatasetFormatError(
                f"{self.images.shape[0]} images vs {len(labels)} labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, limit: int) -> "LabeledDataset":
        limit = min(limit, len(self))
        return LabeledDataset(Tensor(self.images.array[:limit]),
                              self.labels[:limit], self.name)


def _read_file(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _idx_header(data: bytes, path, expected_magic: int, dims: int):
    need = 4 * (1 + dims)
    if len(data) < need:
        raise DatasetFormatError(f"{path}: truncated IDX header", len(data))
    fields = struct.unpack(f">{1 + dims}I", data[:need])
    if fields[0] != expected_magic:
        raise DatasetFormatError(
            f"{path}: bad IDX magic {fields[0]} (expected {expected_magic})", 0)
    return fields[1:], need


def load_mnist(images_path, labels_path, limit: int | None = None) -> LabeledDataset:
    """Parse an IDX image/label file pair into a (N,1,H,W) dataset."""
    img_data = _read_file(images_path)
    (count, rows, cols), off = _idx_header(img_data, images_path,
                                           IDX_IMAGES_MAGIC, 3)
    expected = off + count * rows * cols
    if len(img_data) != expected:
        raise DatasetFormatError(
            f"{images_path}: expected {expected} bytes, found {len(img_data)}",
            min(expected, len(img_data)))

    lbl_data = _read_file(labels_path)
    (lbl_count,), loff = _idx_header(lbl_data, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lbl_data) != loff + lbl_count:
        raise DatasetFormatError(
            f"{labels_path}: expected {loff + lbl_count} bytes, "
            f"found {len(lbl_data)}", min(loff + lbl_count, len(lbl_data)))
    if lbl_count != count:
        raise DatasetFormatError(
            f"{count} images but {lbl_count} labels", loff)

    if limit is not None:
        count = min(count, limit)
    pixels = np.frombuffer(img_data, np.uint8, count * rows * cols, off)
    images = pixels.astype(np.float64).reshape(count, 1, rows, cols) / 255.0
    labels = np.frombuffer(lbl_data, np.uint8, count, loff).astype(np.int64)
    return LabeledDataset(Tensor(images), labels, "mnist")


def load_cifar10(batch_paths, limit: int | None = None) -> LabeledDataset:
    """Parse CIFAR-10 binary batch files into a (N,3,32,32) dataset."""
    if isinstance(batch_paths, (str, bytes)) or hasattr(batch_paths, "read_bytes"):
        batch_paths = [batch_paths]
    images, labels = [], []
    total = 0
    for path in batch_paths:
        data = _read_file(path)
        if len(data) % CIFAR_RECORD:
            raise DatasetFormatError(
                f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}",
                len(data) - len(data) % CIFAR_RECORD)
        n = len(data) // CIFAR_RECORD
        if limit is not None:
            n = min(n, limit - total)
            if n <= 0:
                break
        rec = np.frombuffer(data, np.uint8, n * CIFAR_RECORD).reshape(n, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].astype(np.float64).reshape(n, 3, 32, 32) / 255.0)
        total += n
    if not images:
        raise DatasetFormatError("no CIFAR-10 records loaded")
    return LabeledDataset(Tensor(np.concatenate(images)),
                          np.concatenate(labels), "cifar10")


def write_mnist_idx(images_u8: np.ndarray, labels: np.ndarray,
                    images_path, labels_path) -> None:
    """Write uint8 images (N, H, W) and labels in canonical IDX layout."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def write_cifar10_batch(images_u8: np.ndarray, labels: np.ndarray, path) -> None:
    """Write uint8 images (N, 3, 32, 32) and labels as 3073-byte records."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    n = images_u8.shape[0]
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = np.ascontiguousarray(labels, dtype=np.uint8)
    rec[:, 1:] = images_u8.reshape(n, 3072)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def grid_dimensions(count: int) -> tuple[int, int]:
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    return rows, cols


def tile_image_grid(images: Tensor) -> np.ndarray:
    """Tile a (N, C, H, W) batch into one (C, rows*H, cols*W) image."""
    arr = images.array if images.rank == 4 else images.array[None]
    n, c, h, w = arr.shape
    rows, cols = grid_dimensions(n)
    grid = np.zeros((c, rows * h, cols * w))
    for k in range(n):
        r, col = divmod(k, cols)
        grid[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = arr[k]
    return grid


def export_image_grid(images: Tensor, path) -> None:
    """Write a batch of images as one PGM (1 channel) or PPM (3) grid file.

    Values are clamped to [0, 1] and quantized to 8 bits; the batch is
    tiled row-major into a near-square grid.
    """
    grid = tile_image_grid(images)
    c, height, width = grid.shape
    payload = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    if c == 1:
        header = f"P5\n{width} {height}\n255\n".encode()
        body = payload[0].tobytes()
    elif c == 3:
        header = f"P6\n{width} {height}\n255\n".encode()
        body = payload.transpose(1, 2, 0).tobytes()  # interleave RGB
    else:
        raise CapabilityError(f"cannot export {c}-channel images")
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
