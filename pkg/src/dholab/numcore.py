"""Probability primitives on numpy arrays.

Vectors and matrices are plain float64 ``np.ndarray``; batched variants act
on the last axis. Logs are natural logs. Predictions entering a log are
floored at ``PROB_FLOOR`` and every floor hit is counted in an optional
:class:`ClampCounter`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedSimilarityError

PROB_FLOOR = 1e-12
SUM_TOL = 1e-9


@dataclass
class ClampCounter:
    events: int = 0

    def add(self, n: int) -> None:
        self.events += int(n)


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def is_prob_vector(p, tol: float = SUM_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(
        p.ndim >= 1
        and p.shape[-1] > 0
        and np.all(np.isfinite(p))
        and np.all(p >= 0)
        and np.all(np.abs(p.sum(axis=-1) - 1.0) <= tol)
    )


def as_prob_vector(p, name: str = "probabilities") -> np.ndarray:
    arr = as_vector(p, name)
    if not is_prob_vector(arr):
        raise ValueError(f"{name} is not a probability vector: {arr}")
    return arr


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax over the last axis, max-subtracted.

    Entries equal to ``-inf`` are allowed and map to probability 0.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _floored_log(p: np.ndarray, clamps: ClampCounter | None) -> np.ndarray:
    low = p < PROB_FLOOR
    if clamps is not None and np.any(low):
        clamps.add(np.count_nonzero(low))
    return np.log(np.maximum(p, PROB_FLOOR))


def cross_entropy(pred, label_index: int, clamps: ClampCounter | None = None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= label_index < pred.shape[-1]:
        raise ValueError(f"label {label_index} out of range for {pred.shape[-1]} classes")
    return float(-_floored_log(pred[label_index : label_index + 1], clamps)[0])


def kl_divergence(target, pred, clamps: ClampCounter | None = None) -> float:
    """KL(target || pred) with 0 * log(0/q) = 0."""
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"dimension mismatch: {target.shape} vs {pred.shape}")
    return float(batch_kl(target, pred, clamps).sum())


def batch_cross_entropy(probs, labels, clamps: ClampCounter | None = None) -> np.ndarray:
    """Per-row ``-log probs[i, labels[i]]``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return -_floored_log(picked, clamps)


def batch_kl(targets, preds, clamps: ClampCounter | None = None) -> np.ndarray:
    """Row-wise KL(targets || preds); works on a single vector too."""
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if targets.shape != preds.shape:
        raise ValueError(f"dimension mismatch: {targets.shape} vs {preds.shape}")
    pos = targets > 0
    log_q = _floored_log(np.where(pos, preds, 1.0), clamps)
    log_t = np.log(np.where(pos, targets, 1.0))
    # rounding can push an exact match a hair below zero
    return np.maximum(np.sum(np.where(pos, targets * (log_t - log_q), 0.0), axis=-1), 0.0)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero-norm input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l1_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def entropy(p) -> np.ndarray | float:
    """Shannon entropy (nats) over the last axis; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    pos = p > 0
    h = -np.sum(np.where(pos, p * np.log(np.where(pos, p, 1.0)), 0.0), axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def retemper(probs, factor: float) -> np.ndarray:
    """Re-express probabilities produced at temperature T at temperature T * factor.

    ``softmax(log p / factor)``; zero entries stay zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return softmax(logp, factor)
