"""Calibration / evaluation image sets with a frozen batch partition.

Raw tensor files (little-endian)::

    b"QDAT" | version u32 | ndim u32 | dims u32[ndim] | payload f32[prod(dims)]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"QDAT"
VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images (N, C, H, W) plus a fixed, ordered batch partition of their indices."""

    images: np.ndarray
    source: str = "memory"
    seed: int | None = None
    partition: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        imgs = np.ascontiguousarray(self.images, dtype=np.float32)
        if imgs.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {imgs.shape}")
        if not np.isfinite(imgs).all():
            raise DataFormatError("images contain non-finite values")
        imgs.setflags(write=False)
        object.__setattr__(self, "images", imgs)
        part = self.partition
        if not part and len(imgs):
            part = (tuple(range(len(imgs))),)
        flat = sorted(i for b in part for i in b)
        if flat != list(range(len(imgs))):
            raise ValueError("batch partition must cover every image exactly once")
        object.__setattr__(self, "partition", tuple(tuple(int(i) for i in b) for b in part))

    def __len__(self) -> int:
        return len(self.images)

    def batched(self, batch_size: int, seed: int) -> "Dataset":
        return Dataset(self.images, self.source, self.seed, batches(self, batch_size, seed))

    def iter_batches(self) -> Iterator[np.ndarray]:
        for idx in self.partition:
            yield self.images[list(idx)]

    def batch_list(self) -> list[np.ndarray]:
        return list(self.iter_batches())

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.images[start:stop], f"{self.source}[{start}:{stop}]", self.seed)

    def describe(self) -> dict:
        return {
            "source": self.source,
            "seed": self.seed,
            "num_images": len(self),
            "shape": list(self.images.shape[1:]),
            "batch_sizes": [len(b) for b in self.partition],
        }


def batches(ds: Dataset, batch_size: int, seed: int) -> tuple[tuple[int, ...], ...]:
    """Shuffle indices once with ``seed``, then cut into consecutive batches.

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C]))
    order = rng.permutation(len(ds))
    return tuple(tuple(int(i) for i in order[s:s + batch_size])
                 for s in range(0, len(order), batch_size))


def class_means(num_classes: int, shape=(3, 32, 32), pattern_seed: int = 0,
                grid: int = 4, amplitude: float = 1.0) -> np.ndarray:
    """Per-class mean images: coarse random patterns upsampled to full size."""
    c, h, w = shape
    if h % grid or w % grid:
        raise ValueError(f"image size {h}x{w} not divisible by pattern grid {grid}")
    rng = np.random.default_rng(np.random.SeedSequence([pattern_seed, 0xC1A5]))
    coarse = rng.normal(0.0, amplitude, size=(num_classes, c, grid, grid))
    return np.kron(coarse, np.ones((1, 1, h // grid, w // grid))).astype(np.float32)


def synth_gaussian_classes(num_classes: int, per_class: int, seed: int, shape=(3, 32, 32),
                           pattern_seed: int = 0, noise: float = 1.0) -> Dataset:
    """Class-conditional Gaussian blobs: class mean pattern plus i.i.d. noise.

    ``pattern_seed`` fixes the class means, so sets drawn with different
    ``seed`` values share one distribution. Images are stored class-major.
    """
    means = class_means(num_classes, shape, pattern_seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
    eps = rng.normal(0.0, noise, size=(num_classes, per_class) + tuple(shape))
    imgs = (means[:, None] + eps).reshape((num_classes * per_class,) + tuple(shape))
    return Dataset(imgs.astype(np.float32), f"synth:{num_classes}x{per_class}", seed)


def save_raw(images: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(images, dtype="<f4")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_raw(path, shape=None) -> Dataset:
    """Read a QDAT file; ``shape`` (optional) must match the stored dims."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataFormatError(f"{path}: not a QDAT file (bad magic)")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported QDAT version {version}")
    head = 12 + 4 * ndim
    if len(data) < head:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    if shape is not None and tuple(shape) != tuple(dims):
        raise DataFormatError(f"{path}: stored shape {tuple(dims)} != expected {tuple(shape)}")
    expected = head + 4 * int(np.prod(dims, dtype=np.int64))
    if len(data) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=head).astype(np.float32).reshape(dims)
    if arr.ndim == 3:
        arr = arr[None]
    return Dataset(arr, f"file:{Path(path).name}")
