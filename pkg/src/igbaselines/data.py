"""Datasets: synthetic tabular toys with exact ground truth, IDX image files,
value-range normalization, and a small handwritten-digits stand-in.

The toy generator draws integer features uniformly and labels each instance by
the sum of its first ``k`` features modulo ``c``, so the label depends jointly
on all relevant features and the ground-truth attribution mask is exact.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, FormatError

__all__ = [
    "ToySpec",
    "GroundTruthMask",
    "LabeledDataset",
    "toy_generate",
    "toy_label",
    "load_idx_images",
    "load_idx_labels",
    "save_idx_images",
    "save_idx_labels",
    "load_idx_dataset",
    "normalize",
    "denormalize",
    "dataset_to_csv",
    "digits_dataset",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class ToySpec:
    """Parameters of a synthetic tabular dataset.

    ``features`` total columns, ``relevant`` label-determining columns,
    ``classes`` label categories, ``domain`` integer feature values per column.
    """

    features: int
    relevant: int
    classes: int
    domain: int = 2
    count: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.relevant <= self.features:
            raise ValueError("need 1 <= relevant <= features")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.domain < 2:
            raise ValueError("need at least 2 feature values")
        if self.count < 1:
            raise ValueError("need at least 1 instance")
        if self.classes > self.domain**self.relevant:
            raise ValueError(
                f"{self.classes} classes cannot be realized from "
                f"{self.domain}^{self.relevant} relevant-feature combinations"
            )


@dataclass
class GroundTruthMask:
    """Binary relevance vector: 1 on label-determining features, else 0."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)


@dataclass
class LabeledDataset:
    """Immutable instance batch with labels, value range, and a fixed split.

    ``affine`` records the (scale, offset) applied by the last normalization so
    it can be inverted exactly.
    """

    x: np.ndarray
    y: np.ndarray
    value_range: tuple
    train_idx: np.ndarray
    test_idx: np.ndarray
    affine: tuple = (1.0, 0.0)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.value_range = (float(self.value_range[0]), float(self.value_range[1]))
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)

    @property
    def train_x(self):
        return self.x[self.train_idx]

    @property
    def train_y(self):
        return self.y[self.train_idx]

    @property
    def test_x(self):
        return self.x[self.test_idx]

    @property
    def test_y(self):
        return self.y[self.test_idx]


def _split_indices(n, test_fraction, rng):
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def toy_label(row, relevant, classes):
    """Label of one instance: sum of the first ``relevant`` features mod classes."""
    return int(np.sum(np.asarray(row)[:relevant])) % classes


def toy_generate(spec: ToySpec):
    """Build a toy dataset and its exact ground-truth mask (80/20 split)."""
    rng = np.random.default_rng(spec.seed)
    x = rng.integers(0, spec.domain, size=(spec.count, spec.features)).astype(np.float64)
    y = (x[:, : spec.relevant].sum(axis=1) % spec.classes).astype(np.int64)
    train_idx, test_idx = _split_indices(spec.count, 0.2, rng)
    ds = LabeledDataset(
        x=x,
        y=y,
        value_range=(0.0, float(spec.domain - 1)),
        train_idx=train_idx,
        test_idx=test_idx,
    )
    mask = np.zeros(spec.features)
    mask[: spec.relevant] = 1.0
    return ds, GroundTruthMask(mask)


# --- IDX binary container -------------------------------------------------

def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx_images(path):
    """Parse an IDX image file into a float64 array (n, rows, cols) in [0, 255]."""
    with open(path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, path))
        if magic != IMAGE_MAGIC:
            raise FormatError(f"{path}: bad image magic 0x{magic:08x}")
        pixels = np.frombuffer(_read_exact(fh, n * rows * cols, path), dtype=np.uint8)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} images")
    return pixels.reshape(n, rows, cols).astype(np.float64)


def load_idx_labels(path):
    """Parse an IDX label file into an int64 array."""
    with open(path, "rb") as fh:
        magic, n = struct.unpack(">ii", _read_exact(fh, 8, path))
        if magic != LABEL_MAGIC:
            raise FormatError(f"{path}: bad label magic 0x{magic:08x}")
        labels = np.frombuffer(_read_exact(fh, n, path), dtype=np.uint8)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} labels")
    return labels.astype(np.int64)


def save_idx_images(path, images):
    images = np.asarray(images)
    if images.ndim != 3:
        raise DimensionError("expected (n, rows, cols) images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, *images.shape))
        fh.write(np.clip(np.rint(images), 0, 255).astype(np.uint8).tobytes())


def save_idx_labels(path, labels):
    labels = np.asarray(labels)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def load_idx_dataset(image_path, label_path, test_fraction=0.2, seed=0):
    """Join IDX image and label files into a channel-first LabeledDataset."""
    images = load_idx_images(image_path)
    labels = load_idx_labels(label_path)
    if len(images) != len(labels):
        raise FormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split_indices(len(images), test_fraction, rng)
    return LabeledDataset(
        x=images[:, None, :, :],
        y=labels,
        value_range=(0.0, 255.0),
        train_idx=train_idx,
        test_idx=test_idx,
    )


# --- normalization --------------------------------------------------------

def normalize(ds: LabeledDataset, target_range):
    """Affinely map the dataset onto ``target_range``; invertible via denormalize."""
    lo, hi = ds.value_range
    tlo, thi = float(target_range[0]), float(target_range[1])
    if hi == lo:
        raise ValueError("degenerate source value range")
    scale = (thi - tlo) / (hi - lo)
    offset = tlo - scale * lo
    return replace(
        ds,
        x=ds.x * scale + offset,
        value_range=(tlo, thi),
        affine=(scale, offset),
    )


def denormalize(ds: LabeledDataset):
    """Invert the affine map recorded by the last normalize call."""
    scale, offset = ds.affine
    lo, hi = ds.value_range
    return replace(
        ds,
        x=(ds.x - offset) / scale,
        value_range=((lo - offset) / scale, (hi - offset) / scale),
        affine=(1.0, 0.0),
    )


def dataset_to_csv(ds: LabeledDataset, path):
    """Write instances as CSV: header row, one instance per line, label last."""
    flat = ds.x.reshape(len(ds.x), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, ds.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def digits_dataset(test_fraction=0.4, seed=0, target_range=(-0.42, 2.82), flat=False):
    """Desk-scale 8x8 handwritten digits (10 classes) normalized to ``target_range``.

    Stand-in for a full-size handwriting corpus; channel-first images unless
    ``flat`` is set.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = digits.images.astype(np.float64)
    x = images.reshape(len(images), -1) if flat else images[:, None, :, :]
    rng = np.random.default_rng(seed)
    train_idx, test_idx = _split_indices(len(x), test_fraction, rng)
    ds = LabeledDataset(
        x=x,
        y=digits.target.astype(np.int64),
        value_range=(0.0, 16.0),
        train_idx=train_idx,
        test_idx=test_idx,
    )
    return normalize(ds, target_range)
