"""Dataset ingestion: Gaussian-cluster generator and CSV loader."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Batch


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSource:
    num_classes: int = 4
    per_class: int = 200
    feature_dim: int = 64
    spread: float = 1.0
    seed: int = 0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class CsvSource:
    path: str
    num_classes: int | None = None
    seed: int = 0
    test_fraction: float = 0.2


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx, input_shape=None) -> Batch:
        x = self.inputs[idx]
        if input_shape is not None:
            x = x.reshape((len(x),) + tuple(input_shape))
        return Batch(x, self.labels[idx])


def _read_csv(path: str | Path, num_classes: int | None) -> tuple[np.ndarray, np.ndarray, int]:
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise DatasetError(f"{path}: expected a header with at least one feature and a label")
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{line_no}: expected {width} columns, got {len(row)}")
            try:
                feats = [float(c) for c in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise DatasetError(f"{path}:{line_no}: {exc}") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DatasetError(f"{path}:{line_no}: label {label} outside [0, {num_classes})")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    return np.asarray(rows, dtype=np.float64), y, num_classes or int(y.max()) + 1


def _synthetic(src: SyntheticSource) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(src.seed)
    centers = rng.standard_normal((src.num_classes, src.feature_dim))
    y = np.repeat(np.arange(src.num_classes), src.per_class)
    x = centers[y] + src.spread * rng.standard_normal((len(y), src.feature_dim))
    return x, y


def make_dataset(source: SyntheticSource | CsvSource) -> tuple[Dataset, Dataset]:
    """Deterministic train/test split, standardised with train-split statistics."""
    if isinstance(source, CsvSource):
        x, y, num_classes = _read_csv(source.path, source.num_classes)
    else:
        if source.num_classes < 2 or source.per_class < 1 or source.feature_dim < 1:
            raise DatasetError("synthetic source needs >= 2 classes, >= 1 sample per class")
        x, y = _synthetic(source)
        num_classes = source.num_classes
    if not 0 < source.test_fraction < 1:
        raise DatasetError("test_fraction must lie in (0, 1)")

    order = np.random.default_rng(source.seed + 1).permutation(len(y))
    n_test = max(1, int(round(len(y) * source.test_fraction)))
    if n_test >= len(y):
        raise DatasetError("dataset too small to split")
    test_idx, train_idx = order[:n_test], order[n_test:]
    mean = x[train_idx].mean(axis=0)
    std = x[train_idx].std(axis=0)
    std[std == 0] = 1.0
    x = (x - mean) / std
    return (Dataset(x[train_idx], y[train_idx], num_classes),
            Dataset(x[test_idx], y[test_idx], num_classes))
