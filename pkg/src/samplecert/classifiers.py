"""Differentiable base classifiers.

Both model kinds are stacks of affine layers with ``tanh`` between them; a
linear classifier is the zero-hidden-layer case. Class scores are the raw
outputs of the last layer ("logits").

Binary linear convention: a signed score ``s = w.x + b`` is exposed as the
two logits ``(-s, +s)``, so the class-1 margin is ``2s``. Exact logit ties
resolve to the smallest label index everywhere (``np.argmax`` semantics),
which makes a score of exactly zero predict class 0.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from . import rng
from .datamodel import Dataset
from .errors import DomainError, ParseError, ShapeError, TrainingError

log = logging.getLogger(__name__)

MODEL_FORMAT = "samplecert-model"
MODEL_VERSION = 1


class Classifier:
    kind = "layered"

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.weights = [np.array(W, dtype=np.float64) for W in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError("need one bias vector per weight matrix")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k}: input width {W.shape[1]} does not match previous layer")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise DomainError("model parameters must be finite")
            W.setflags(write=False)
            b.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.dim] + [W.shape[0] for W in self.weights]

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise ShapeError(f"input dimension {X.shape[-1]} != model dimension {self.dim}")
        return X

    def logits(self, X) -> np.ndarray:
        """Class scores for one point (d,) -> (K,) or a batch (N, d) -> (N, K)."""
        h = self._check(X)
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if k < last:
                h = np.tanh(h)
        return h

    def logits_and_jacobian(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Logits (N, K) and their input Jacobian (N, K, d) for a batch (N, d)."""
        h = np.atleast_2d(self._check(X))
        J = np.broadcast_to(np.eye(self.dim), (h.shape[0], self.dim, self.dim))
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            J = np.einsum("oi,nid->nod", W, J)
            if k < last:
                h = np.tanh(h)
                J = J * (1.0 - h * h)[:, :, None]
        return h, J

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def canonical_bytes(self) -> bytes:
        """Fixed-order byte image of the parameters (used for hashing)."""
        parts = [self.kind.encode(), struct.pack("<I", len(self.weights))]
        for p in self.params():
            parts.append(struct.pack("<" + "I" * (p.ndim + 1), p.ndim, *p.shape))
            parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return b"".join(parts)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    def equals(self, other: "Classifier") -> bool:
        return self.kind == other.kind and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.params(), other.params())
        ) and len(self.params()) == len(other.params())


class LinearClassifier(Classifier):
    kind = "linear"

    def __init__(self, weights: np.ndarray, biases: np.ndarray):
        super().__init__([weights], [biases])

    @classmethod
    def binary(cls, w: Sequence[float], b: float = 0.0) -> "LinearClassifier":
        """Two-class model with signed score ``w.x + b`` (logits ``-s, +s``)."""
        w = np.asarray(w, dtype=np.float64)
        return cls(np.stack([-w, w]), np.array([-b, b], dtype=np.float64))

    @property
    def W(self) -> np.ndarray:
        return self.weights[0]

    @property
    def b(self) -> np.ndarray:
        return self.biases[0]

    def signed_score_params(self) -> tuple[np.ndarray, float]:
        """(w, b) with class 1 winning iff w.x + b > 0. Two-class models only."""
        if self.num_classes != 2:
            raise DomainError("signed score is defined for two-class models only")
        return (self.W[1] - self.W[0]) / 2.0, float(self.b[1] - self.b[0]) / 2.0


class MlpClassifier(Classifier):
    kind = "mlp"

    @classmethod
    def zeros(cls, sizes: Sequence[int]) -> "MlpClassifier":
        return cls([np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(o) for o in sizes[1:]])

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int) -> "MlpClassifier":
        gen = rng.stream(seed, "mlp-init")
        Ws = [gen.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(sizes[:-1], sizes[1:])]
        return cls(Ws, [np.zeros(o) for o in sizes[1:]])


class StackedClassifier:
    """M same-architecture models evaluated together on per-model batches (M, N, d)."""

    def __init__(self, models: Sequence[Classifier]):
        if not models:
            raise ShapeError("need at least one model")
        sizes = models[0].layer_sizes
        if any(m.layer_sizes != sizes for m in models):
            raise ShapeError("stacked models must share layer sizes")
        self.weights = [np.stack([m.weights[k] for m in models]) for k in range(len(sizes) - 1)]
        self.biases = [np.stack([m.biases[k] for m in models]) for k in range(len(sizes) - 1)]
        self.num_classes = sizes[-1]
        self.dim = sizes[0]
        self.size = len(models)

    def logits_and_jacobian(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = np.asarray(X, dtype=np.float64)
        M, N, d = h.shape
        J = np.broadcast_to(np.eye(d), (M, N, d, d))
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = np.einsum("moi,mni->mno", W, h) + b[:, None, :]
            J = np.einsum("moi,mnid->mnod", W, J)
            if k < last:
                h = np.tanh(h)
                J = J * (1.0 - h * h)[..., None]
        return h, J


def model_from_dict(d: dict) -> Classifier:
    if d.get("format") != MODEL_FORMAT:
        raise ParseError("not a samplecert model file")
    if d.get("version") != MODEL_VERSION:
        raise ParseError(f"unsupported model version {d.get('version')!r}")
    Ws = [np.array(W, dtype=np.float64) for W in d["weights"]]
    bs = [np.array(b, dtype=np.float64) for b in d["biases"]]
    if d["kind"] == "linear":
        return LinearClassifier(Ws[0], bs[0])
    if d["kind"] == "mlp":
        return MlpClassifier(Ws, bs)
    raise ParseError(f"unknown model kind {d['kind']!r}")


def save_model(model: Classifier, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path: str | Path) -> Classifier:
    return model_from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ queries


@dataclass(frozen=True)
class LogitMargin:
    value: float
    top_label: int
    runner_up: int


def predict(model: Classifier, x) -> int | np.ndarray:
    """Argmax label; ties go to the smallest index. Accepts (d,) or (N, d)."""
    z = model.logits(x)
    return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)


def _margins(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(z.shape[0])
    others = z.copy()
    others[rows, y] = -np.inf
    runner = np.argmax(others, axis=1)
    return z[rows, y] - z[rows, runner], runner


def logit_margin(model: Classifier, x, y: int) -> LogitMargin:
    """phi_y(x) = f_y(x) - max_{y' != y} f_{y'}(x)."""
    if not 0 <= y < model.num_classes:
        raise DomainError(f"label {y} outside [0, {model.num_classes})")
    z = np.atleast_2d(model.logits(x))
    val, runner = _margins(z, np.array([y]))
    return LogitMargin(float(val[0]), int(y), int(runner[0]))


def margins(model: Classifier, X, y) -> np.ndarray:
    """Vectorised phi_{y_i}(x_i) for a batch."""
    z = np.atleast_2d(model.logits(X))
    return _margins(z, np.asarray(y, dtype=np.int64))[0]


def input_gradient(model: Classifier, x, y: int) -> np.ndarray:
    """Gradient of the class-``y`` logit with respect to the input."""
    _, J = model.logits_and_jacobian(x)
    return J[0, y]


def margin_gradient(model: Classifier, x, y: int) -> tuple[float, np.ndarray]:
    """(phi_y(x), grad_x phi_y(x)) using the runner-up active at ``x``."""
    z, J = model.logits_and_jacobian(x)
    val, runner = _margins(z, np.array([y]))
    return float(val[0]), J[0, y] - J[0, runner[0]]


def linear_smoothing_oracle(model: LinearClassifier, x, sigma: float) -> float:
    """Exact P[class 1] for a two-class linear model under N(0, sigma^2 I) input noise."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    w, b = model.signed_score_params()
    norm = float(np.linalg.norm(w))
    if norm == 0.0:
        raise DomainError("degenerate model: zero weight vector")
    return float(ndtr((float(w @ np.asarray(x, dtype=np.float64)) + b) / (sigma * norm)))


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "mlp"  # "linear" | "mlp"
    hidden: tuple[int, ...] = (16,)
    steps: int = 300
    lr: float = 0.05
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class TrainReport:
    final_loss: float
    train_accuracy: float


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_classifier(
    ds: Dataset, cfg: TrainConfig = TrainConfig(), num_classes: int | None = None
) -> tuple[Classifier, TrainReport]:
    """Full-batch Adam on mean softmax cross-entropy plus L2 on weights."""
    if ds.n == 0:
        raise DomainError("cannot train on an empty dataset")
    K = num_classes or ds.num_classes
    X, y = ds.X, ds.y
    n = X.shape[0]
    onehot = np.zeros((n, K))
    onehot[np.arange(n), y] = 1.0

    if cfg.arch == "linear":
        sizes = [ds.dim, K]
        Ws = [np.zeros((K, ds.dim))]
        bs = [np.zeros(K)]
    elif cfg.arch == "mlp":
        sizes = [ds.dim, *cfg.hidden, K]
        init = MlpClassifier.init(sizes, cfg.seed)
        Ws = [W.copy() for W in init.weights]
        bs = [b.copy() for b in init.biases]
    else:
        raise DomainError(f"unknown architecture {cfg.arch!r}")

    params = Ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    L = len(Ws)
    loss = np.nan
    for step in range(1, cfg.steps + 1):
        acts = [X]
        h = X
        for k in range(L):
            h = h @ Ws[k].T + bs[k]
            if k < L - 1:
                h = np.tanh(h)
            acts.append(h)
        P = _softmax(h)
        loss = -np.mean(np.log(np.clip(P[np.arange(n), y], 1e-300, None)))
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        G = (P - onehot) / n
        gW = [None] * L
        gb = [None] * L
        for k in range(L - 1, -1, -1):
            gW[k] = G.T @ acts[k] + cfg.weight_decay * Ws[k]
            gb[k] = G.sum(axis=0)
            if k:
                G = (G @ Ws[k]) * (1.0 - acts[k] ** 2)
        grads = gW + gb
        c1 = 1 - b1**step
        c2 = 1 - b2**step
        for p, g, mi, vi in zip(params, grads, m, v):
            mi *= b1
            mi += (1 - b1) * g
            vi *= b2
            vi += (1 - b2) * g * g
            p -= cfg.lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingError("non-finite parameters after training")

    model: Classifier = LinearClassifier(Ws[0], bs[0]) if cfg.arch == "linear" else MlpClassifier(Ws, bs)
    acc = float(np.mean(predict(model, X) == y))
    log.debug("trained %s: loss=%.4g acc=%.4f", cfg.arch, loss, acc)
    return model, TrainReport(float(loss), acc)
