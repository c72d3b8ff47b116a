"""Toy datasets and an IDX file reader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    """Inputs scaled into [0, 1] and integer (or bit) targets."""

    x: np.ndarray
    y: np.ndarray
    name: str = "data"

    def __len__(self) -> int:
        return len(self.y)

    def split(self, test_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        te, tr = order[:n_test], order[n_test:]
        return (Dataset(self.x[tr], self.y[tr], self.name), Dataset(self.x[te], self.y[te], self.name))


def _to_unit(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def blobs(n: int = 1000, n_classes: int = 4, dim: int = 2, spread: float = 0.6,
          seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with centres on a circle of radius 2."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centres = np.zeros((n_classes, dim))
    centres[:, 0], centres[:, 1 % dim] = 2 * np.cos(angles), 2 * np.sin(angles)
    y = rng.integers(0, n_classes, size=n)
    x = centres[y] + spread * rng.standard_normal((n, dim))
    return Dataset(_to_unit(x, -4.0, 4.0), y, "blobs")


def spirals(n: int = 1000, turns: float = 1.5, noise: float = 0.08, seed: int = 0) -> Dataset:
    """Two interleaved spirals (binary labels)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    t = np.sqrt(rng.uniform(0, 1, size=n)) * turns * 2 * np.pi
    r = t / (turns * 2 * np.pi)
    sign = np.where(y == 0, 1.0, -1.0)
    x = np.stack([sign * r * np.cos(t), sign * r * np.sin(t)], axis=1)
    x += noise * rng.standard_normal(x.shape)
    return Dataset(_to_unit(x, -1.3, 1.3), y, "spirals")


def copy_task(n: int = 512, steps: int = 8, delay: int = 1, seed: int = 0) -> Dataset:
    """Random bit streams; the target at step t is the input bit at step t - delay (0 before)."""
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n, steps))
    y = np.zeros_like(bits)
    y[:, delay:] = bits[:, :steps - delay]
    return Dataset(bits[:, :, None].astype(np.float64), y, "copy")


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read an IDX array (e.g. MNIST-format images 0x00000803 or labels 0x00000801)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    type_code, ndim = raw[2], raw[3]
    if type_code not in _IDX_TYPES:
        raise ValueError(f"{path}: unsupported IDX element type 0x{type_code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_TYPES[type_code])
    count = int(np.prod(dims)) if dims else 1
    body = raw[4 + 4 * ndim:]
    if len(body) != count * dtype.itemsize:
        raise ValueError(f"{path}: payload has {len(body)} bytes, header promises {count * dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes[array.dtype.newbyteorder("=")]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def idx_dataset(images_path, labels_path, limit: int | None = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if len(images) != len(labels):
        raise ValueError("image and label counts differ")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), "idx")


def make_dataset(cfg: dict) -> Dataset:
    """Build a dataset from a config dict such as ``{"name": "blobs", "n": 800}``."""
    cfg = dict(cfg)
    name = cfg.pop("name")
    if name == "blobs":
        return blobs(**cfg)
    if name == "spirals":
        return spirals(**cfg)
    if name == "copy":
        return copy_task(**cfg)
    if name == "idx":
        return idx_dataset(cfg["images"], cfg["labels"], cfg.get("limit"))
    raise ValueError(f"unknown dataset {name!r}")
