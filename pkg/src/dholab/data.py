"""Datasets, synthetic Gaussian mixtures, CSV ingestion and semi-supervised splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CSVParseError, InsufficientDataError, SchemaError

UNLABELED = -1


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: Optional[int] = None


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus integer labels; ``UNLABELED`` (-1) marks a missing label."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must have one entry per example")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if np.any(y >= self.num_classes) or np.any(y < UNLABELED):
            raise SchemaError(f"labels must lie in [0, {self.num_classes}) or be unlabeled")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def example(self, i: int) -> Example:
        y = int(self.labels[i])
        return Example(self.features[i], None if y == UNLABELED else y)

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, split or self.split)

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.labels, self.num_classes, self.split)


@dataclass(frozen=True)
class LabeledSplit:
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    shots_per_class: Optional[int] = None
    label_fraction: Optional[float] = None

    def __post_init__(self):
        if np.intersect1d(self.labeled_indices, self.unlabeled_indices).size:
            raise ValueError("labeled and unlabeled partitions overlap")

    @property
    def num_labeled(self) -> int:
        return len(self.labeled_indices)

    @property
    def num_unlabeled(self) -> int:
        return len(self.unlabeled_indices)

    @property
    def train_indices(self) -> np.ndarray:
        """D^(l) ∪ D^(u) in ascending order."""
        return np.sort(np.concatenate([self.labeled_indices, self.unlabeled_indices]))

    def strip_labels(self, dataset: Dataset) -> Dataset:
        """Copy of ``dataset`` in which only the labeled partition keeps labels."""
        labels = np.full(len(dataset), UNLABELED, dtype=np.int64)
        labels[self.labeled_indices] = dataset.labels[self.labeled_indices]
        return Dataset(dataset.features, labels, dataset.num_classes, dataset.split)

    def attach_labels(self, stripped: Dataset, labels) -> Dataset:
        labels = np.asarray(labels, dtype=np.int64)
        out = stripped.labels.copy()
        out[self.unlabeled_indices] = labels[self.unlabeled_indices]
        return Dataset(stripped.features, out, stripped.num_classes, stripped.split)


def _indices_by_class(dataset: Dataset) -> list[np.ndarray]:
    return [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]


def kshot_split(dataset: Dataset, k: int, seed: int) -> LabeledSplit:
    """K labeled examples per class, drawn uniformly without replacement."""
    if k < 1:
        raise ValueError("K must be positive")
    rng = np.random.default_rng(seed)
    labeled = []
    for c, idx in enumerate(_indices_by_class(dataset)):
        if len(idx) < k:
            raise InsufficientDataError(f"class {c} has {len(idx)} examples, fewer than K={k}")
        labeled.append(np.sort(rng.choice(idx, size=k, replace=False)))
    labeled = np.concatenate(labeled)
    unlabeled = np.setdiff1d(np.arange(len(dataset)), labeled)
    return LabeledSplit(labeled, unlabeled, shots_per_class=k)


def fraction_split(dataset: Dataset, fraction: float, seed: int) -> LabeledSplit:
    """Stratified split labeling about ``fraction`` of every class (at least one each)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    C = dataset.num_classes
    if fraction * len(dataset) < C:
        raise InsufficientDataError(
            f"fraction {fraction} of {len(dataset)} examples cannot cover {C} classes"
        )
    rng = np.random.default_rng(seed)
    labeled = []
    for c, idx in enumerate(_indices_by_class(dataset)):
        if len(idx) == 0:
            raise InsufficientDataError(f"class {c} has no examples")
        n = min(len(idx), max(1, int(round(fraction * len(idx)))))
        labeled.append(np.sort(rng.choice(idx, size=n, replace=False)))
    labeled = np.concatenate(labeled)
    unlabeled = np.setdiff1d(np.arange(len(dataset)), labeled)
    return LabeledSplit(labeled, unlabeled, label_fraction=fraction)


def carve_validation(dataset: Dataset, split: LabeledSplit, fraction: float = 0.2, seed: int = 0):
    """Move ``fraction`` of the labeled partition into a held-out validation set.

    Returns ``(train_split, val_dataset)``; the carved examples leave both
    training partitions. Used when no validation data is declared.
    """
    rng = np.random.default_rng(seed)
    lab = split.labeled_indices
    n_val = int(math.floor(fraction * len(lab)))
    if n_val == 0:
        raise InsufficientDataError("labeled set too small to carve a validation set")
    val = np.sort(rng.choice(lab, size=n_val, replace=False))
    keep = np.setdiff1d(lab, val)
    new_split = LabeledSplit(keep, split.unlabeled_indices, split.shots_per_class, split.label_fraction)
    return new_split, dataset.subset(val, split="val")


def sample_class_means(num_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    """Class means uniform on the sphere of radius ``separation``."""
    g = rng.standard_normal((num_classes, dim))
    return separation * g / np.linalg.norm(g, axis=1, keepdims=True)


def generate_gaussian_mixture(
    num_classes: int,
    dim: int,
    n_per_class: int,
    class_separation: float,
    noise_scale: float,
    seed: int,
    means: Optional[np.ndarray] = None,
    split: str = "train",
) -> Dataset:
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    if noise_scale <= 0:
        raise ValueError("noise_scale must be positive")
    rng = np.random.default_rng(seed)
    if means is None:
        means = sample_class_means(num_classes, dim, class_separation, rng)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = means[labels] + noise_scale * rng.standard_normal((len(labels), dim))
    return Dataset(x, labels, num_classes, split)


@dataclass
class MixtureSplits:
    means: np.ndarray
    train: Dataset
    val: Dataset
    test: Dataset
    extra: dict = field(default_factory=dict)


def mixture_splits(
    num_classes: int,
    dim: int,
    class_separation: float,
    noise_scale: float,
    seed: int,
    n_train: int = 100,
    n_val: int = 50,
    n_test: int = 200,
) -> MixtureSplits:
    """Train/val/test draws (per-class counts) from one mixture with shared means."""
    from .seeding import rng_for

    means = sample_class_means(num_classes, dim, class_separation, rng_for(seed, "mixture-means"))
    sets = {}
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        sub_seed = int(rng_for(seed, f"mixture-{name}").integers(2**31))
        sets[name] = generate_gaussian_mixture(
            num_classes, dim, n, class_separation, noise_scale, sub_seed, means=means, split=name
        )
    return MixtureSplits(means, sets["train"], sets["val"], sets["test"])


def zscore(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Per-feature standardisation with statistics from ``train`` only."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [d.with_features((d.features - mu) / sd) for d in (train, *others)]


def jitter(features: np.ndarray, scale: float, rng) -> np.ndarray:
    """Isotropic Gaussian feature jitter (off unless ``scale > 0``)."""
    if scale <= 0:
        return features
    return features + scale * rng.standard_normal(features.shape)


def load_csv_dataset(
    path,
    feature_dim: Optional[int] = None,
    label_column: str = "label",
    num_classes: Optional[int] = None,
    split: str = "train",
) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows; an empty label cell means unlabeled.

    ``num_classes`` defaults to ``max(label) + 1`` (at least 2).
    Row numbers in errors count the header as row 1.
    """
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CSVParseError(1, "empty file") from None
        if label_column not in header:
            raise SchemaError(f"missing label column {label_column!r}")
        label_pos = header.index(label_column)
        feat_pos = [i for i in range(len(header)) if i != label_pos]
        if feature_dim is not None and len(feat_pos) != feature_dim:
            raise SchemaError(f"expected {feature_dim} feature columns, found {len(feat_pos)}")
        rows, labels = [], []
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVParseError(rownum, f"expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in feat_pos])
            except ValueError as exc:
                raise CSVParseError(rownum, f"non-numeric feature ({exc})") from None
            cell = row[label_pos].strip()
            if cell == "":
                labels.append(UNLABELED)
                continue
            try:
                lab = int(cell)
            except ValueError:
                raise CSVParseError(rownum, f"label {cell!r} is not an integer") from None
            if lab < 0 or (num_classes is not None and lab >= num_classes):
                raise SchemaError(f"row {rownum}: label {lab} outside [0, {num_classes})")
            labels.append(lab)
    if not rows:
        raise CSVParseError(2, "no data rows")
    x = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise CSVParseError(2, "non-finite feature value")
    if num_classes is None:
        num_classes = max(2, max(labels) + 1)
    return Dataset(x, np.array(labels, dtype=np.int64), num_classes, split)


def save_csv_dataset(dataset: Dataset, path) -> None:
    d = dataset.feature_dim
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + ["" if y == UNLABELED else int(y)])
