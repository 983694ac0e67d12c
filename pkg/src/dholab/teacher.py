"""Frozen teacher: precomputed categorical predictions for every example."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import UNLABELED, Dataset
from .errors import TeacherFormatError
from .numcore import softmax

ROW_SUM_TOL = 1e-4


@dataclass(frozen=True)
class TeacherPredictions:
    """One probability row per dataset example, produced at ``temperature``."""

    probs: np.ndarray
    temperature: float = 1.0
    accuracy: Optional[float] = None

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("teacher probabilities must be a 2-d array")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-9):
            raise ValueError("teacher rows must be probability vectors")
        if not self.temperature > 0:
            raise ValueError("teacher temperature must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class OracleTeacherConfig:
    prototypes: np.ndarray  # (C, d_in)
    noise_scale: float = 0.0
    temperature: float = 0.01
    corruption_rate: float = 0.0

    def __post_init__(self):
        if not 0 <= self.corruption_rate <= 1:
            raise ValueError("corruption_rate must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def _cosine_matrix(x: np.ndarray, protos: np.ndarray) -> np.ndarray:
    xn = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
    pn = np.linalg.norm(protos, axis=1, keepdims=True)
    return (x / xn) @ (protos / pn).T


def oracle_teacher_predict(config: OracleTeacherConfig, dataset: Dataset, seed: int,
                           strata=None) -> TeacherPredictions:
    """Cosine-to-prototype logits plus Gaussian noise, with random wrong-class corruption.

    A corrupted example gets logits peaked on a uniformly chosen class other
    than its reference class (its label, or the clean argmax when unlabeled).
    Each example is corrupted independently with probability
    ``corruption_rate``; if ``strata`` (a list of index arrays) is given,
    exactly ``round(rate * len(stratum))`` examples of each stratum are
    corrupted instead.
    """
    protos = np.asarray(config.prototypes, dtype=np.float64)
    C = protos.shape[0]
    if protos.shape[1] != dataset.feature_dim:
        raise ValueError(f"prototype dim {protos.shape[1]} != dataset dim {dataset.feature_dim}")
    if C != dataset.num_classes:
        raise ValueError(f"{C} prototypes for {dataset.num_classes} classes")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    clean = _cosine_matrix(dataset.features, protos) / config.temperature
    logits = clean + config.noise_scale * rng.standard_normal((n, C))

    ref = np.where(dataset.labels != UNLABELED, dataset.labels, clean.argmax(axis=1))
    if strata is None:
        corrupt = rng.random(n) < config.corruption_rate
    else:
        corrupt = np.zeros(n, dtype=bool)
        for idx in strata:
            idx = np.asarray(idx, dtype=np.int64)
            k = int(round(config.corruption_rate * len(idx)))
            corrupt[rng.choice(idx, size=k, replace=False)] = True
    offset = rng.integers(1, C, size=n)
    wrong = (ref + offset) % C
    peaked = np.zeros((n, C))
    peaked[np.arange(n), wrong] = 1.0 / config.temperature
    logits = np.where(corrupt[:, None], peaked, logits)

    probs = softmax(logits)
    acc = _accuracy(probs, dataset) if dataset.labeled_mask.any() else None
    return TeacherPredictions(probs, config.temperature, acc)


def calibrate_corruption(prototypes, dataset: Dataset, target_accuracy: float, temperature: float = 0.01) -> float:
    """Corruption rate bringing the expected noiseless-oracle accuracy to ``target_accuracy``."""
    clean = oracle_teacher_predict(OracleTeacherConfig(prototypes, 0.0, temperature, 0.0), dataset, 0)
    a0 = clean.accuracy
    if a0 is None or a0 <= 0:
        raise ValueError("clean oracle has no measurable accuracy")
    return float(np.clip(1.0 - target_accuracy / a0, 0.0, 1.0))


def _accuracy(probs: np.ndarray, dataset: Dataset) -> float:
    mask = dataset.labeled_mask
    return float(np.mean(probs[mask].argmax(axis=1) == dataset.labels[mask]))


def measure_teacher_accuracy(preds: TeacherPredictions, dataset: Dataset) -> float:
    if len(preds) != len(dataset):
        raise ValueError("teacher predictions and dataset differ in length")
    if not dataset.labeled_mask.any():
        raise ValueError("dataset has no labeled examples")
    return _accuracy(preds.probs, dataset)


def load_teacher_predictions(path, dataset: Dataset, temperature: float = 1.0) -> TeacherPredictions:
    """CSV with header ``p0..p{C-1}``; rows within 1e-4 of summing to one are renormalised."""
    C = dataset.num_classes
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != [f"p{c}" for c in range(C)]:
            raise TeacherFormatError(1, f"expected header p0..p{C - 1}, got {header}")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != C:
                raise TeacherFormatError(rownum, f"expected {C} columns, got {len(row)}")
            try:
                vals = np.array([float(v) for v in row])
            except ValueError:
                raise TeacherFormatError(rownum, "non-numeric probability") from None
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise TeacherFormatError(rownum, "probabilities must be finite and non-negative")
            s = vals.sum()
            if abs(s - 1.0) > ROW_SUM_TOL:
                raise TeacherFormatError(rownum, f"row sums to {s}")
            rows.append(vals / s)
    if len(rows) != len(dataset):
        raise TeacherFormatError(len(rows) + 1, f"{len(rows)} rows for {len(dataset)} examples")
    probs = np.array(rows)
    acc = _accuracy(probs, dataset) if dataset.labeled_mask.any() else None
    return TeacherPredictions(probs, temperature, acc)


def save_teacher_predictions(preds: TeacherPredictions, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"p{c}" for c in range(preds.num_classes)])
        for row in preds.probs:
            w.writerow([repr(float(v)) for v in row])
