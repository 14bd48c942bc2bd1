"""Image corpora: CSV / IDX readers, seeded splits and the bundled 8x8 digits corpus."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DTYPE


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def image_shape(self) -> tuple:
        return self.X_train.shape[1:]

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.y_train), len(self.y_val), len(self.y_test)


def split_dataset(X, y, fractions=(0.7, 0.1, 0.2), seed: int = 0,
                  num_classes: int | None = None) -> Dataset:
    """Seeded shuffle, then floor-sized train and validation parts; test takes the rest."""
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0):
        raise ValueError("split fractions must be three non-negative numbers summing to 1")
    n = len(y)
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    tr, va, te = np.split(order, [n_train, n_train + n_val])
    k = int(y.max()) + 1 if num_classes is None else num_classes
    return Dataset(X[tr], y[tr], X[va], y[va], X[te], y[te], k)


def _to_images(pixels: np.ndarray) -> np.ndarray:
    side = math.isqrt(pixels.shape[1])
    if side * side != pixels.shape[1]:
        raise DataError(f"row of {pixels.shape[1]} pixels is not a square image")
    return (pixels / 255.0).astype(DTYPE).reshape(-1, 1, side, side)


def _check_labels(y: np.ndarray, num_classes: int | None) -> None:
    if len(y) == 0:
        raise DataError("dataset is empty")
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes})")


def read_csv(path, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``label, pixel_0, ..., pixel_{n-1}`` with pixels in 0..255; a header is optional."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            if vals[0] != int(vals[0]):
                raise DataError(f"{path}:{lineno}: label {vals[0]} is not an integer")
            if rows and len(vals) - 1 != len(rows[0]):
                raise DataError(f"{path}:{lineno}: expected {len(rows[0])} pixels")
            labels.append(int(vals[0]))
            rows.append(vals[1:])
    y = np.asarray(labels, dtype=np.int64)
    _check_labels(y, num_classes)
    return _to_images(np.asarray(rows)), y


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DataError(f"{path}: only unsigned-byte IDX files are supported")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if data.size != math.prod(dims):
        raise DataError(f"{path}: payload size does not match header")
    return data.reshape(dims)


def read_idx(path, labels_path=None, num_classes: int | None = None):
    """MNIST-style IDX pair; the labels file defaults to ``path`` with 'images' -> 'labels'."""
    path = Path(path)
    labels_path = Path(labels_path) if labels_path else path.with_name(
        path.name.replace("images", "labels"))
    images = _read_idx(path)
    y = _read_idx(labels_path).astype(np.int64)
    if images.shape[0] != y.shape[0]:
        raise DataError("image and label counts differ")
    _check_labels(y, num_classes)
    return _to_images(images.reshape(len(y), -1).astype(np.float64)), y


def load_dataset(path, format: str = "csv", fractions=(0.7, 0.1, 0.2), seed: int = 0,
                 num_classes: int | None = None, labels_path=None) -> Dataset:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    if format == "csv":
        X, y = read_csv(path, num_classes)
    elif format == "idx":
        X, y = read_idx(path, labels_path, num_classes)
    else:
        raise DataError(f"unknown dataset format {format!r}")
    return split_dataset(X, y, fractions, seed, num_classes)


def write_digits_corpus(path) -> Path:
    """Write the 8x8 ten-class handwritten digits set (1797 images) as CSV."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    pixels = np.rint(digits.data * (255.0 / 16.0)).astype(int)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"p{i}" for i in range(pixels.shape[1])])
        for label, row in zip(digits.target, pixels):
            w.writerow([int(label), *row.tolist()])
    return path
