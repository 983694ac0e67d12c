"""Student network: ReLU perceptron feature extractor plus linear/cosine heads.

All forward passes are batched: inputs are ``(n, d_in)`` arrays (a single
1-d example is promoted and the result squeezed back).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CheckpointError, StateError, UndefinedSimilarityError

CHECKPOINT_FORMAT = "dholab-checkpoint/1"
SHO, DHO = "sho", "dho"


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


@dataclass
class ActivationCache:
    """Layer inputs and pre-activations kept for backprop."""

    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)


@dataclass
class FeatureExtractor:
    weights: list  # layer l: (out_l, in_l)
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("extractor needs >= 1 layer with matching biases")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} vs weight {W.shape}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim {W.shape[1]} incompatible")

    @classmethod
    def zeros(cls, dims) -> "FeatureExtractor":
        dims = list(dims)
        return cls(
            [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
            [np.zeros(o) for o in dims[1:]],
        )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list:
        return [self.input_dim] + [W.shape[0] for W in self.weights]

    def forward(self, x, cache: Optional[ActivationCache] = None) -> np.ndarray:
        h, single = _batch(x)
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} != extractor input dim {self.input_dim}")
        for W, b in zip(self.weights, self.biases):
            a = h @ W.T + b
            if cache is not None:
                cache.inputs.append(h)
                cache.preacts.append(a)
            h = np.maximum(a, 0.0)
        return h[0] if single else h

    def backward(self, grad_z, cache: Optional[ActivationCache]):
        """Gradients ``(dW list, db list)`` for upstream ``dL/dz`` of shape (n, d)."""
        if cache is None or len(cache.preacts) != len(self.weights):
            raise StateError("backward needs the activations retained by forward")
        g, _ = _batch(grad_z)
        dWs, dbs = [None] * len(self.weights), [None] * len(self.weights)
        for l in range(len(self.weights) - 1, -1, -1):
            da = g * (cache.preacts[l] > 0)
            dWs[l] = da.T @ cache.inputs[l]
            dbs[l] = da.sum(axis=0)
            if l:
                g = da @ self.weights[l]
        return dWs, dbs


@dataclass
class LinearHead:
    W: np.ndarray  # (C, d)
    b: np.ndarray  # (C,)

    kind = "linear"

    def __post_init__(self):
        if self.b.shape != (self.W.shape[0],):
            raise ValueError("bias must have one entry per class")

    def forward(self, z) -> np.ndarray:
        zb, single = _batch(z)
        if zb.shape[1] != self.W.shape[1]:
            raise ValueError(f"feature dim {zb.shape[1]} != head dim {self.W.shape[1]}")
        out = zb @ self.W.T + self.b
        return out[0] if single else out


@dataclass
class CosineHead:
    """Logits ``CosSim(z, w_c) / scale``; no bias."""

    W: np.ndarray
    scale: float = 0.01

    kind = "cosine"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("cosine head scale must be positive")
        if np.any(np.linalg.norm(self.W, axis=1) == 0):
            raise UndefinedSimilarityError("cosine head has a zero weight row")

    def forward(self, z, eps: float = 0.0) -> np.ndarray:
        """``eps > 0`` floors feature norms instead of raising (used in training)."""
        zb, single = _batch(z)
        if zb.shape[1] != self.W.shape[1]:
            raise ValueError(f"feature dim {zb.shape[1]} != head dim {self.W.shape[1]}")
        zn = np.linalg.norm(zb, axis=1, keepdims=True)
        if eps <= 0 and np.any(zn == 0):
            raise UndefinedSimilarityError("zero feature vector")
        zn = np.maximum(zn, eps) if eps > 0 else zn
        wn = np.linalg.norm(self.W, axis=1)
        out = (zb / zn) @ (self.W / wn[:, None]).T / self.scale
        return out[0] if single else out


Head = Union[LinearHead, CosineHead]


def forward_features(extractor: FeatureExtractor, x, cache: Optional[ActivationCache] = None):
    return extractor.forward(x, cache)


def linear_head_forward(head: LinearHead, z):
    return head.forward(z)


def cosine_head_forward(head: CosineHead, z):
    return head.forward(z)


@dataclass
class StudentModel:
    extractor: FeatureExtractor
    ce_head: LinearHead
    kd_head: Head
    mode: str = DHO

    def __post_init__(self):
        if self.mode not in (SHO, DHO):
            raise ValueError(f"mode must be 'sho' or 'dho', got {self.mode!r}")
        if self.mode == SHO and self.kd_head is not self.ce_head:
            raise ValueError("SHO mode requires a single shared head")
        if self.mode == DHO and self.kd_head is self.ce_head:
            raise ValueError("DHO mode requires two distinct heads")

    @property
    def num_classes(self) -> int:
        return self.ce_head.W.shape[0]

    def parameters(self) -> dict:
        """Name -> array (live references, updated in place by the optimizer)."""
        p = {}
        for l, (W, b) in enumerate(zip(self.extractor.weights, self.extractor.biases)):
            p[f"g.W{l}"] = W
            p[f"g.b{l}"] = b
        if self.mode == SHO:
            p["head.W"], p["head.b"] = self.ce_head.W, self.ce_head.b
        else:
            p["ce.W"], p["ce.b"] = self.ce_head.W, self.ce_head.b
            p["kd.W"] = self.kd_head.W
            if isinstance(self.kd_head, LinearHead):
                p["kd.b"] = self.kd_head.b
        return p

    def head_logits(self, z, kd_eps: float = 0.0):
        ce = self.ce_head.forward(z)
        if self.kd_head is self.ce_head:
            return ce, ce
        if isinstance(self.kd_head, CosineHead):
            return ce, self.kd_head.forward(z, eps=kd_eps)
        return ce, self.kd_head.forward(z)

    def copy(self) -> "StudentModel":
        return model_from_dict(model_to_dict(self))


def init_random(model: StudentModel, seed: int) -> StudentModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, in place."""
    rng = np.random.default_rng(seed)

    def fill(W):
        bound = 1.0 / np.sqrt(W.shape[1])
        W[...] = rng.uniform(-bound, bound, size=W.shape)

    for W, b in zip(model.extractor.weights, model.extractor.biases):
        fill(W)
        b[...] = 0.0
    heads = [model.ce_head] if model.mode == SHO else [model.ce_head, model.kd_head]
    for h in heads:
        fill(h.W)
        if isinstance(h, LinearHead):
            h.b[...] = 0.0
    return model


def init_language_aware(head: Head, class_embeddings) -> Head:
    """Set head rows to per-class embedding vectors (and biases to zero)."""
    E = np.asarray(class_embeddings, dtype=np.float64)
    if E.shape != head.W.shape:
        raise ValueError(f"embeddings shape {E.shape} != head weight shape {head.W.shape}")
    if isinstance(head, CosineHead) and np.any(np.linalg.norm(E, axis=1) == 0):
        raise UndefinedSimilarityError("zero embedding row for a cosine head")
    head.W[...] = E
    if isinstance(head, LinearHead):
        head.b[...] = 0.0
    return head


def prototype_embeddings(extractor: FeatureExtractor, prototypes, row_norm: Optional[float] = None) -> np.ndarray:
    """Class embeddings in the student's feature space from input-space class prototypes.

    Prototypes go through the (initial) extractor; the class-mean is removed so
    rows discriminate between classes, as zero-shot text embeddings do. Rows are
    rescaled to ``row_norm`` when given.
    """
    E = extractor.forward(np.asarray(prototypes, dtype=np.float64))
    E = E - E.mean(axis=0)
    if row_norm is not None:
        norms = np.linalg.norm(E, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise UndefinedSimilarityError("prototype embeddings collapse to the class mean")
        E = E / norms * row_norm
    return E


def build_model(
    input_dim: int,
    num_classes: int,
    hidden: tuple = (64, 64),
    feature_dim: int = 32,
    mode: str = DHO,
    kd_head: str = "linear",
    cosine_scale: float = 0.01,
    seed: int = 0,
) -> StudentModel:
    """Randomly initialised student; SHO shares one linear head."""
    extractor = FeatureExtractor.zeros([input_dim, *hidden, feature_dim])
    ce = LinearHead(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))
    if mode == SHO:
        if kd_head != "linear":
            raise ValueError("SHO uses a single linear head")
        kd = ce
    elif kd_head == "linear":
        kd = LinearHead(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))
    elif kd_head == "cosine":
        kd = CosineHead(np.ones((num_classes, feature_dim)), cosine_scale)
    else:
        raise ValueError(f"unknown kd head kind {kd_head!r}")
    return init_random(StudentModel(extractor, ce, kd, mode), seed)


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in np.ravel(a, order="C")]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def model_to_dict(model: StudentModel) -> dict:
    kd = model.kd_head
    return {
        "mode": model.mode,
        "layer_dims": model.extractor.dims,
        "kd_head": kd.kind,
        "cosine_scale": kd.scale if isinstance(kd, CosineHead) else None,
        "params": {k: _arr(v) for k, v in model.parameters().items()},
    }


def model_from_dict(d: dict) -> StudentModel:
    p = {k: _unarr(v) for k, v in d["params"].items()}
    n_layers = len(d["layer_dims"]) - 1
    ext = FeatureExtractor([p[f"g.W{l}"] for l in range(n_layers)], [p[f"g.b{l}"] for l in range(n_layers)])
    if d["mode"] == SHO:
        head = LinearHead(p["head.W"], p["head.b"])
        return StudentModel(ext, head, head, SHO)
    ce = LinearHead(p["ce.W"], p["ce.b"])
    if d["kd_head"] == "cosine":
        kd = CosineHead(p["kd.W"], float(d["cosine_scale"]))
    else:
        kd = LinearHead(p["kd.W"], p["kd.b"])
    return StudentModel(ext, ce, kd, DHO)


def save_checkpoint(path, model: StudentModel, alpha=None, beta=None, optimizer_state=None, extra=None):
    """Write a versioned JSON checkpoint; floats are stored with exact repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model": model_to_dict(model),
        "interpolation": {"alpha": alpha, "beta": beta},
        "optimizer": optimizer_state_to_dict(optimizer_state) if optimizer_state else None,
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> dict:
    """Returns dict with keys ``model``, ``alpha``, ``beta``, ``optimizer``, ``extra``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format')!r}")
    try:
        model = model_from_dict(doc["model"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    opt = doc.get("optimizer")
    return {
        "model": model,
        "alpha": doc["interpolation"]["alpha"],
        "beta": doc["interpolation"]["beta"],
        "optimizer": optimizer_state_from_dict(opt) if opt else None,
        "extra": doc.get("extra", {}),
    }


def optimizer_state_to_dict(state) -> dict:
    return {
        "step": state.step,
        "m": {k: _arr(v) for k, v in state.m.items()},
        "v": {k: _arr(v) for k, v in state.v.items()},
    }


def optimizer_state_from_dict(d: dict):
    from .trainer import OptimizerState

    return OptimizerState(
        step=d["step"],
        m={k: _unarr(v) for k, v in d["m"].items()},
        v={k: _unarr(v) for k, v in d["v"].items()},
    )
