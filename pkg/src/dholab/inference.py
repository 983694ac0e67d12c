"""Dual-head interpolation inference and post-training (alpha, beta) search."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .model import StudentModel
from .numcore import entropy, softmax

DEFAULT_ALPHAS = tuple(round(0.1 * i, 1) for i in range(11))
DEFAULT_BETAS = (0.1, 0.3, 0.5, 0.7, 1.0, 2.0)
TEACHER_QUALITY_THRESHOLD = 0.75


@dataclass(frozen=True)
class InterpolationSetting:
    alpha: float
    beta: float = 1.0
    val_accuracy: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


def interpolate(p_ce, kd_logits, alpha, beta: float) -> np.ndarray:
    """``alpha * p_ce + (1 - alpha) * softmax(kd_logits / beta)``.

    ``alpha`` may be a scalar or one weight per row.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("alpha must lie in [0, 1]")
    if not beta > 0:
        raise ValueError("beta must be positive")
    p_ce = np.asarray(p_ce, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    return alpha * p_ce + (1 - alpha) * softmax(kd_logits, beta)


def head_outputs(model: StudentModel, x):
    """``(p_ce, kd_logits)`` for a batch; compute once, reuse for every (alpha, beta)."""
    z = model.extractor.forward(np.atleast_2d(x))
    ce_logits, kd_logits = model.head_logits(z, kd_eps=1e-12)
    return softmax(ce_logits), kd_logits


def entropy_adaptive_alpha(p_ce, p_kd) -> np.ndarray | float:
    """Per-example weight ``exp(-H(p_ce)) / (exp(-H(p_ce)) + exp(-H(p_kd)))``."""
    h_ce, h_kd = np.asarray(entropy(p_ce)), np.asarray(entropy(p_kd))
    a = 1.0 / (1.0 + np.exp(h_ce - h_kd))
    return float(a) if a.ndim == 0 else a


def predict(model: StudentModel, x, setting: InterpolationSetting, adaptive: bool = False):
    """Argmax class of the interpolated distribution (ties go to the lowest index)."""
    single = np.asarray(x).ndim == 1
    p = predict_proba(model, x, setting, adaptive)
    y = p.argmax(axis=1)
    return int(y[0]) if single else y


def predict_proba(model: StudentModel, x, setting: InterpolationSetting, adaptive: bool = False) -> np.ndarray:
    p_ce, kd_logits = head_outputs(model, x)
    alpha = entropy_adaptive_alpha(p_ce, softmax(kd_logits, setting.beta)) if adaptive else setting.alpha
    return interpolate(p_ce, kd_logits, alpha, setting.beta)


def emulate_sho(lam: float) -> InterpolationSetting:
    """Setting under which dual-head inference approximates SHO trained with ``lam``."""
    return InterpolationSetting(alpha=lam, beta=1.0)


def heuristic_setting(teacher_accuracy: Optional[float]) -> InterpolationSetting:
    """Fallback without validation data: alpha 0.2 for strong teachers, 0.4 otherwise; beta 0.5."""
    strong = teacher_accuracy is not None and teacher_accuracy >= TEACHER_QUALITY_THRESHOLD
    return InterpolationSetting(alpha=0.2 if strong else 0.4, beta=0.5)


@dataclass
class GridSearchResult:
    alphas: tuple
    betas: tuple
    accuracy: np.ndarray  # (len(alphas), len(betas))
    best: InterpolationSetting

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha\\beta"] + [repr(float(b)) for b in self.betas])
            for a, row in zip(self.alphas, self.accuracy):
                w.writerow([repr(float(a))] + [repr(float(v)) for v in row])

    def summary(self) -> dict:
        return {
            "best_alpha": self.best.alpha,
            "best_beta": self.best.beta,
            "best_accuracy": self.best.val_accuracy,
            "alphas": list(self.alphas),
            "betas": list(self.betas),
        }

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")


def grid_accuracy(p_ce, kd_logits, labels, alphas: Sequence[float], betas: Sequence[float]) -> np.ndarray:
    acc = np.zeros((len(alphas), len(betas)))
    for j, b in enumerate(betas):
        p_kd = softmax(kd_logits, b)
        for i, a in enumerate(alphas):
            pred = (a * p_ce + (1 - a) * p_kd).argmax(axis=1)
            acc[i, j] = np.mean(pred == labels)
    return acc


def grid_search(
    model: StudentModel,
    validation: Dataset,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    betas: Sequence[float] = DEFAULT_BETAS,
) -> GridSearchResult:
    """Validation accuracy over the full grid; ties prefer alpha near 0.5, then smaller beta."""
    mask = validation.labeled_mask
    if not mask.any():
        raise ValueError("validation set has no labeled examples")
    if len(alphas) == 0 or len(betas) == 0:
        raise ValueError("grids must be non-empty")
    alphas, betas = tuple(float(a) for a in alphas), tuple(float(b) for b in betas)
    for a in alphas:
        InterpolationSetting(a, 1.0)
    for b in betas:
        InterpolationSetting(0.5, b)
    p_ce, kd_logits = head_outputs(model, validation.features[mask])
    acc = grid_accuracy(p_ce, kd_logits, validation.labels[mask], alphas, betas)
    top = acc.max()
    cands = [(abs(alphas[i] - 0.5), betas[j], i, j) for i, j in zip(*np.nonzero(acc == top))]
    _, _, i, j = min(cands)
    return GridSearchResult(alphas, betas, acc, InterpolationSetting(alphas[i], betas[j], float(top)))


@dataclass
class HeadAccuracies:
    ce: float
    kd: float
    combined: float
    predictions: np.ndarray
    p_ce: np.ndarray
    p_kd: np.ndarray
    alpha: np.ndarray | float


def evaluate_heads(model: StudentModel, dataset: Dataset, setting: InterpolationSetting,
                   adaptive: bool = False) -> HeadAccuracies:
    """CE-head, KD-head and interpolated accuracy on the labeled part of ``dataset``.

    Predictions cover every example.
    """
    p_ce, kd_logits = head_outputs(model, dataset.features)
    p_kd = softmax(kd_logits, setting.beta)
    alpha = entropy_adaptive_alpha(p_ce, p_kd) if adaptive else setting.alpha
    pred = interpolate(p_ce, kd_logits, alpha, setting.beta).argmax(axis=1)
    mask = dataset.labeled_mask
    y = dataset.labels[mask]

    def acc(pr):
        return float(np.mean(pr[mask] == y)) if mask.any() else float("nan")

    return HeadAccuracies(acc(p_ce.argmax(axis=1)), acc(p_kd.argmax(axis=1)), acc(pred), pred, p_ce, p_kd, alpha)
