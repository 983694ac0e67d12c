"""Distillation training loop, AdamW/SGD updates, cosine schedule, linear probe."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import UNLABELED, Dataset, LabeledSplit, jitter
from .errors import DivergenceError, NonFiniteGradientError
from .losses import Batch, ConflictTrace, conflict_metrics, forward_backward
from .model import FeatureExtractor, LinearHead, StudentModel
from .numcore import ClampCounter, batch_cross_entropy, retemper, softmax
from .seeding import rng_for
from .teacher import TeacherPredictions

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.5
    zeta: float = 0.01  # teacher temperature
    eta: float = 2.0  # KD training temperature
    epochs: int = 200
    batch_size: int = 64
    unlabeled_batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    schedule: str = "cosine"  # or "constant"
    warmup_steps: int = 0
    optimizer: str = "adamw"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    feature_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.batch_size < 1 or self.unlabeled_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.zeta <= 0 or self.eta <= 0:
            raise ValueError("temperatures must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def cosine_schedule(step: int, total_steps: int, warmup_steps: int = 0) -> float:
    """Linear warmup to 1, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return 1.0 if step < total_steps else 0.0
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


def optimizer_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig, multiplier: float = 1.0):
    """Update ``params`` in place for every name in ``grads`` (decoupled weight decay)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    lr = config.lr * multiplier
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if config.weight_decay:
            p -= lr * config.weight_decay * p
        if config.optimizer == "sgd":
            p -= lr * g
            continue
        b1, b2 = config.beta1, config.beta2
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        t = state.t.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        state.m[name], state.v[name], state.t[name] = m, v, t
    state.step += 1
    return params, state


@dataclass
class TrainReport:
    config: dict
    epoch_losses: list = field(default_factory=list)  # dicts with ce/kd/combined
    trace: list = field(default_factory=list)  # ConflictTrace per step
    steps: int = 0
    clamp_events: int = 0
    labeled_with_replacement: bool = False
    duration_s: float = 0.0

    def summary(self) -> dict:
        return {
            "config": self.config,
            "epoch_losses": self.epoch_losses,
            "steps": self.steps,
            "clamp_events": self.clamp_events,
            "labeled_with_replacement": self.labeled_with_replacement,
            "duration_s": self.duration_s,
        }


def distillation_targets(teacher: TeacherPredictions, eta: float) -> np.ndarray:
    """Teacher rows re-expressed at temperature ``zeta * eta``."""
    return retemper(teacher.probs, eta)


def train(
    model: StudentModel,
    dataset: Dataset,
    split: LabeledSplit,
    teacher: TeacherPredictions,
    config: TrainConfig,
    opt_state: Optional[OptimizerState] = None,
    on_step: Optional[Callable[[int, ConflictTrace], None]] = None,
) -> tuple[TrainReport, OptimizerState]:
    """Run ``config.epochs`` passes of dual-head (or aliased single-head) distillation.

    Each step draws ``batch_size`` labeled examples from the labeled partition
    and an unlabeled batch from a per-epoch shuffle of labeled ∪ unlabeled.
    """
    if len(teacher) != len(dataset):
        raise ValueError("teacher predictions must cover every dataset index")
    labeled = np.asarray(split.labeled_indices)
    if np.any(dataset.labels[labeled] == UNLABELED):
        raise ValueError("labeled partition contains examples without labels")
    pool = split.train_indices
    targets = distillation_targets(teacher, config.eta)
    state = opt_state or OptimizerState()
    batch_rng = rng_for(config.seed, "batch-order")
    jitter_rng = rng_for(config.seed, "feature-jitter")
    clamps = ClampCounter()

    B, Bu = config.batch_size, config.unlabeled_batch_size
    replace = len(labeled) < B
    if replace:
        log.warning("labeled set (%d) smaller than batch size %d; sampling with replacement", len(labeled), B)
    steps_per_epoch = math.ceil(len(pool) / Bu)
    total = steps_per_epoch * config.epochs
    report = TrainReport(config=asdict(config), labeled_with_replacement=replace)
    params = model.parameters()
    X = dataset.features
    started = time.perf_counter()

    for epoch in range(config.epochs):
        sums = np.zeros(3)
        perm = batch_rng.permutation(pool)
        for s in range(steps_per_epoch):
            step = epoch * steps_per_epoch + s
            u_idx = perm[s * Bu : (s + 1) * Bu]
            l_idx = batch_rng.choice(labeled, size=B, replace=replace)
            batch = Batch(
                x_l=jitter(X[l_idx], config.feature_jitter, jitter_rng),
                y_l=dataset.labels[l_idx],
                p_l=targets[l_idx],
                x_u=jitter(X[u_idx], config.feature_jitter, jitter_rng),
                p_u=targets[u_idx],
            )
            ev = forward_backward(model, batch, config.lam, config.eta, clamps)
            if not math.isfinite(ev.losses.combined):
                raise DivergenceError(f"non-finite loss at step {step}")
            trace = conflict_metrics(ev, step)
            report.trace.append(trace)
            if on_step is not None:
                on_step(step, trace)
            mult = cosine_schedule(step, total, config.warmup_steps) if config.schedule == "cosine" else 1.0
            optimizer_step(params, ev.grads.combined(config.lam), state, config, mult)
            sums += (ev.losses.ce_loss, ev.losses.kd_loss, ev.losses.combined)
        avg = sums / steps_per_epoch
        report.epoch_losses.append({"epoch": epoch + 1, "ce": avg[0], "kd": avg[1], "combined": avg[2]})
        log.debug("epoch %d: ce=%.4f kd=%.4f combined=%.4f", epoch + 1, *avg)

    report.steps = total
    report.clamp_events = clamps.events
    report.duration_s = time.perf_counter() - started
    return report, state


@dataclass
class ProbeConfig:
    steps: int = 500
    lr: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0


def train_linear_head(features: np.ndarray, labels: np.ndarray, num_classes: int, config: ProbeConfig) -> LinearHead:
    """Fit a fresh linear head with full-batch AdamW on cross-entropy."""
    rng = np.random.default_rng(config.seed)
    d = features.shape[1]
    bound = 1.0 / np.sqrt(d)
    head = LinearHead(rng.uniform(-bound, bound, (num_classes, d)), np.zeros(num_classes))
    params = {"W": head.W, "b": head.b}
    tc = TrainConfig(lr=config.lr, weight_decay=config.weight_decay)
    state = OptimizerState()
    Y = np.zeros((len(labels), num_classes))
    Y[np.arange(len(labels)), labels] = 1.0
    for step in range(config.steps):
        P = softmax(head.forward(features))
        G = (P - Y) / len(labels)
        optimizer_step(params, {"W": G.T @ features, "b": G.sum(axis=0)}, state, tc,
                       cosine_schedule(step, config.steps))
    return head


def linear_probe(extractor: FeatureExtractor, train_set: Dataset, test_set: Dataset,
                 config: Optional[ProbeConfig] = None) -> float:
    """Test accuracy of a linear head trained on frozen extractor features with full labels."""
    config = config or ProbeConfig()
    if np.any(train_set.labels == UNLABELED) or np.any(test_set.labels == UNLABELED):
        raise ValueError("linear probe needs fully labeled train and test sets")
    head = train_linear_head(extractor.forward(train_set.features), train_set.labels, train_set.num_classes, config)
    pred = head.forward(extractor.forward(test_set.features)).argmax(axis=1)
    return float(np.mean(pred == test_set.labels))


def mean_cross_entropy(model: StudentModel, dataset: Dataset) -> float:
    mask = dataset.labeled_mask
    p = softmax(model.ce_head.forward(model.extractor.forward(dataset.features[mask])))
    return float(batch_cross_entropy(p, dataset.labels[mask]).mean())
