"""SHO/DHO losses, explicit gradients, and CE-vs-KD gradient conflict metrics.

One routine (:func:`forward_backward`) serves both modes: in SHO the two
heads are the same object, so dual-head evaluation with aliased heads *is*
single-head evaluation. CE and KD gradients are kept separate per parameter
so their alignment can be measured before they are mixed with ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import UndefinedSimilarityError
from .model import DHO, SHO, ActivationCache, CosineHead, LinearHead, StudentModel
from .numcore import ClampCounter, batch_cross_entropy, batch_kl, cosine_similarity, softmax


@dataclass
class Batch:
    """Labeled part ``(x_l, y_l, p_l)`` and unlabeled part ``(x_u, p_u)``.

    ``p_l``/``p_u`` are the teacher distillation targets, already at the
    training temperature.
    """

    x_l: np.ndarray
    y_l: np.ndarray
    p_l: np.ndarray
    x_u: np.ndarray
    p_u: np.ndarray


@dataclass
class LossBreakdown:
    ce_loss: float
    kd_loss: float
    combined: float
    lam: float


@dataclass
class GradientBundle:
    """Per-parameter gradients of the CE loss and of the KD loss, unmixed."""

    mode: str
    ce: dict
    kd: dict
    theta_names: list

    def _head(self, loss: str) -> str:
        return "head" if self.mode == SHO else loss

    @property
    def grad_W_ce(self):
        return self.ce[f"{self._head('ce')}.W"]

    @property
    def grad_b_ce(self):
        return self.ce[f"{self._head('ce')}.b"]

    @property
    def grad_W_kd(self):
        return self.kd[f"{self._head('kd')}.W"]

    @property
    def grad_b_kd(self):
        return self.kd.get(f"{self._head('kd')}.b")

    @property
    def theta_ce(self) -> np.ndarray:
        return np.concatenate([self.ce[n].ravel() for n in self.theta_names])

    @property
    def theta_kd(self) -> np.ndarray:
        return np.concatenate([self.kd[n].ravel() for n in self.theta_names])

    def combined(self, lam: float) -> dict:
        """Gradient of ``lam*CE + (1-lam)*KD`` for parameters on a live gradient path.

        Parameters reachable only through a zero-weighted loss are omitted, so
        the optimizer leaves them untouched.
        """
        out = {}
        for name in self.ce:
            ce_live = lam != 0 and _reaches(name, "ce", self.mode)
            kd_live = lam != 1 and _reaches(name, "kd", self.mode)
            if ce_live or kd_live:
                out[name] = lam * self.ce[name] + (1.0 - lam) * self.kd[name]
        return out


def _reaches(name: str, loss: str, mode: str) -> bool:
    if name.startswith("g.") or mode == SHO:
        return True
    return name.startswith(loss + ".")


@dataclass
class ConflictTrace:
    step: int
    cossim_head: Optional[float]
    cossim_theta: Optional[float]
    inner_product: float
    mode: str
    layer_cossims: dict = field(default_factory=dict)


@dataclass
class Evaluation:
    """Everything one forward/backward pass produces."""

    losses: LossBreakdown
    grads: GradientBundle
    p_ce: np.ndarray  # student CE-head probabilities, labeled batch
    q_kd: np.ndarray  # student KD-head probabilities at eta, labeled batch
    y_onehot: np.ndarray
    p_teacher: np.ndarray  # teacher targets, labeled batch


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def head_gradients(probs, target, features, temperature: float = 1.0):
    """Batch-mean gradient of CE/KL w.r.t. a linear head's ``(W, b)``.

    For one example this is ``((p̂ - target) zᵀ, p̂ - target)``; KD heads
    trained on ``logits / temperature`` pick up the ``1/temperature`` factor.
    """
    P = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    T = np.atleast_2d(np.asarray(target, dtype=np.float64))
    Z = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if P.shape != T.shape or P.shape[0] != Z.shape[0]:
        raise ValueError(f"shape mismatch: probs {P.shape}, target {T.shape}, features {Z.shape}")
    G = (P - T) / (temperature * P.shape[0])
    return G.T @ Z, G.sum(axis=0)


def _logit_grads(head, G: np.ndarray, z: np.ndarray):
    """Backprop logit gradient ``G`` through ``head``: returns (dW, db or None, dz)."""
    if isinstance(head, LinearHead):
        return G.T @ z, G.sum(axis=0), G @ head.W
    zn = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    wn = np.linalg.norm(head.W, axis=1, keepdims=True)
    zh, wh = z / zn, head.W / wn
    cos = zh @ wh.T
    A = G / head.scale
    dz = (A @ wh - np.sum(A * cos, axis=1, keepdims=True) * zh) / zn
    dW = (A.T @ zh - np.sum(A * cos, axis=0)[:, None] * wh) / wn
    return dW, None, dz


def forward_backward(
    model: StudentModel,
    batch: Batch,
    lam: float,
    eta: float,
    clamps: Optional[ClampCounter] = None,
) -> Evaluation:
    if len(batch.y_l) == 0:
        raise ValueError("labeled batch is empty")
    if not 0 <= lam <= 1:
        raise ValueError("lam must lie in [0, 1]")
    C = model.num_classes
    B, Bu = len(batch.y_l), len(batch.x_u)
    ext = model.extractor

    cache_l = ActivationCache()
    z_l = ext.forward(np.atleast_2d(batch.x_l), cache_l)
    ce_logits, kd_logits = model.head_logits(z_l, kd_eps=1e-12)
    p_ce = softmax(ce_logits)
    q_l = softmax(kd_logits, eta)
    y = one_hot(batch.y_l, C)
    p_l = np.atleast_2d(batch.p_l)

    ce_loss = float(batch_cross_entropy(p_ce, batch.y_l, clamps).mean())
    kd_loss = float(batch_kl(p_l, q_l, clamps).mean())

    G_ce = (p_ce - y) / B
    G_kd_l = (q_l - p_l) / (eta * B)
    dW_ce, db_ce, dz_ce = _logit_grads(model.ce_head, G_ce, z_l)
    dW_kd, db_kd, dz_kd_l = _logit_grads(model.kd_head, G_kd_l, z_l)

    theta_kd_parts = [ext.backward(dz_kd_l, cache_l)]
    if Bu:
        cache_u = ActivationCache()
        z_u = ext.forward(np.atleast_2d(batch.x_u), cache_u)
        _, kd_logits_u = model.head_logits(z_u, kd_eps=1e-12)
        q_u = softmax(kd_logits_u, eta)
        p_u = np.atleast_2d(batch.p_u)
        kd_loss += float(batch_kl(p_u, q_u, clamps).mean())
        dW_u, db_u, dz_kd_u = _logit_grads(model.kd_head, (q_u - p_u) / (eta * Bu), z_u)
        dW_kd = dW_kd + dW_u
        db_kd = None if db_kd is None else db_kd + db_u
        theta_kd_parts.append(ext.backward(dz_kd_u, cache_u))

    dWs_ce, dbs_ce = ext.backward(dz_ce, cache_l)
    dWs_kd = [sum(p[0][l] for p in theta_kd_parts) for l in range(len(ext.weights))]
    dbs_kd = [sum(p[1][l] for p in theta_kd_parts) for l in range(len(ext.weights))]

    ce, kd = {}, {}
    theta_names = []
    for l in range(len(ext.weights)):
        ce[f"g.W{l}"], kd[f"g.W{l}"] = dWs_ce[l], dWs_kd[l]
        ce[f"g.b{l}"], kd[f"g.b{l}"] = dbs_ce[l], dbs_kd[l]
        theta_names += [f"g.W{l}", f"g.b{l}"]
    if model.mode == SHO:
        ce["head.W"], ce["head.b"] = dW_ce, db_ce
        kd["head.W"], kd["head.b"] = dW_kd, db_kd
    else:
        ce["ce.W"], ce["ce.b"] = dW_ce, db_ce
        kd["ce.W"], kd["ce.b"] = np.zeros_like(dW_ce), np.zeros_like(db_ce)
        kd["kd.W"], ce["kd.W"] = dW_kd, np.zeros_like(dW_kd)
        if db_kd is not None:
            kd["kd.b"], ce["kd.b"] = db_kd, np.zeros_like(db_kd)

    losses = LossBreakdown(ce_loss, kd_loss, lam * ce_loss + (1 - lam) * kd_loss, lam)
    return Evaluation(losses, GradientBundle(model.mode, ce, kd, theta_names), p_ce, q_l, y, p_l)


def sho_losses(model: StudentModel, batch: Batch, lam: float, eta: float, clamps=None) -> LossBreakdown:
    if model.mode != SHO:
        raise ValueError("sho_losses needs a single-head (SHO) model")
    return forward_backward(model, batch, lam, eta, clamps).losses


def dho_losses(model: StudentModel, batch: Batch, lam: float, eta: float, clamps=None) -> LossBreakdown:
    """CE through the CE head, KD through the KD head (identical to SHO when heads alias)."""
    return forward_backward(model, batch, lam, eta, clamps).losses


def backprop_extractor(model: StudentModel, grad_z_ce, grad_z_kd, cache: Optional[ActivationCache]):
    """Extractor gradients for separate upstream ``dL/dz`` of the CE and KD losses.

    Returns ``(theta_ce, theta_kd)``, each a ``(dW list, db list)`` pair.
    """
    return model.extractor.backward(grad_z_ce, cache), model.extractor.backward(grad_z_kd, cache)


def _cos_or_none(a, b) -> Optional[float]:
    try:
        return cosine_similarity(a, b)
    except UndefinedSimilarityError:
        return None


def conflict_metrics(evaluation: Evaluation, step: int = 0) -> ConflictTrace:
    """Cosine alignment of CE and KD gradients on the head and on the extractor.

    The inner-product term is the batch mean of ``(p̂_CE - y)ᵀ(p̂_KD - p)``
    (in SHO both probabilities come from the shared head).
    """
    g = evaluation.grads
    layer = {}
    names = g.theta_names
    for i in range(0, len(names), 2):
        a = np.concatenate([g.ce[names[i]].ravel(), g.ce[names[i + 1]].ravel()])
        b = np.concatenate([g.kd[names[i]].ravel(), g.kd[names[i + 1]].ravel()])
        layer[f"layer{i // 2}"] = _cos_or_none(a, b)
    inner = float(np.mean(np.sum((evaluation.p_ce - evaluation.y_onehot) * (evaluation.q_kd - evaluation.p_teacher), axis=1)))
    return ConflictTrace(
        step=step,
        cossim_head=_cos_or_none(g.grad_W_ce, g.grad_W_kd),
        cossim_theta=_cos_or_none(g.theta_ce, g.theta_kd),
        inner_product=inner,
        mode=g.mode,
        layer_cossims=layer,
    )


def ema_smooth(values, factor: float = 0.99) -> list:
    """Exponential moving average seeded with the first present value; ``None`` entries carry forward."""
    out, s = [], None
    for v in values:
        if v is not None and not (isinstance(v, float) and np.isnan(v)):
            s = v if s is None else factor * s + (1 - factor) * v
        out.append(s)
    return out


def feature_distillation_loss(student_features, teacher_features, projection) -> float:
    """Batch mean of ``||P z - t||²``."""
    Z = np.atleast_2d(np.asarray(student_features, dtype=np.float64))
    T = np.atleast_2d(np.asarray(teacher_features, dtype=np.float64))
    P = np.asarray(projection, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != Z.shape[1] or P.shape[0] != T.shape[1] or Z.shape[0] != T.shape[0]:
        raise ValueError(f"shape mismatch: z {Z.shape}, teacher {T.shape}, projection {P.shape}")
    return float(np.mean(np.sum((Z @ P.T - T) ** 2, axis=1)))


TRACE_COLUMNS = ("step", "cossim_head", "cossim_theta", "inner_product", "mode")


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_trace_csv(traces, path) -> None:
    """One row per step; an absent cosine (zero gradient) is an empty cell."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in traces:
            w.writerow([t.step, _fmt(t.cossim_head), _fmt(t.cossim_theta), _fmt(t.inner_product), t.mode])


def write_layer_trace_csv(traces, path) -> None:
    import csv

    if not traces:
        return
    layers = sorted(traces[0].layer_cossims)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", *layers])
        for t in traces:
            w.writerow([t.step, *(_fmt(t.layer_cossims.get(k)) for k in layers)])


def read_trace_csv(path) -> list:
    import csv

    def num(s):
        return None if s == "" else float(s)

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        ConflictTrace(int(r["step"]), num(r["cossim_head"]), num(r["cossim_theta"]),
                      num(r["inner_product"]), r["mode"])
        for r in rows
    ]
