"""
Adaptive probability learning: a linear embedding trained with a source
classification loss plus walker and visit association losses.

Notation follows the usual associative-learning convention: ``A`` are the
embedded source vectors (n_s x d), ``B`` the embedded target vectors
(n_t x d), ``M = A B^T``.
"""
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .arcsim import CATEGORIES, _atomic_write
from .wavefeat import D, Normalizer

EPS = 1e-12
K = len(CATEGORIES)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    d: int = 8
    lambda_w: float = 1.0
    lambda_v: float = 0.5
    learning_rate: float = 0.01
    max_epochs: int = 2000
    patience: int = 200
    seed: int = 0
    checkpoint_every: int = 0       # 0 disables checkpoints

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.lambda_w < 0 or self.lambda_v < 0:
            raise ValueError("loss weights must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")


@dataclass
class EmbeddingModel:
    W: np.ndarray                   # d x D
    head: np.ndarray                # K x d
    bias: np.ndarray                # K
    hyper: Hyperparams = field(default_factory=Hyperparams)
    normalizer: Optional[Normalizer] = None
    curve: List[float] = field(default_factory=list)
    bank: Optional[np.ndarray] = None           # embedded source features
    bank_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.head = np.asarray(self.head, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        d = self.W.shape[0]
        if self.head.shape != (self.bias.shape[0], d):
            raise ValueError("head/bias shape mismatch")
        for arr in (self.W, self.head, self.bias):
            if not np.all(np.isfinite(arr)):
                raise TrainingError("model has non-finite parameters")

    @property
    def d(self) -> int:
        return self.W.shape[0]

    def params(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.W, self.head, self.bias

    def copy(self) -> "EmbeddingModel":
        return dataclasses.replace(self, W=self.W.copy(), head=self.head.copy(),
                                   bias=self.bias.copy(), curve=list(self.curve))

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for arr in self.params():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def init_model(hyper: Hyperparams, n_features: int = D, n_classes: int = K) -> EmbeddingModel:
    if hyper.d >= n_features:
        raise ValueError(f"embedding dimension {hyper.d} must be < {n_features}")
    rng = np.random.default_rng(hyper.seed)
    W = rng.normal(0.0, math.sqrt(2.0 / (n_features + hyper.d)), size=(hyper.d, n_features))
    return EmbeddingModel(W, np.zeros((n_classes, hyper.d)), np.zeros(n_classes), hyper)


def embed(model: EmbeddingModel, v) -> np.ndarray:
    """Map normalized feature vector(s) into the embedding space."""
    x = np.asarray(getattr(v, "values", v), dtype=float)
    if x.shape[-1] != model.W.shape[1]:
        raise ValueError(f"expected {model.W.shape[1]} features, got {x.shape[-1]}")
    return x @ model.W.T


# ---------------------------------------------------------------------------
# Association


def softmax_rows(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class AssociationMatrices:
    M: np.ndarray
    Pab: np.ndarray     # n_s x n_t
    Pba: np.ndarray     # n_t x n_s
    Paba: np.ndarray    # n_s x n_s


def association(source_embeddings, target_embeddings) -> AssociationMatrices:
    A = np.atleast_2d(np.asarray(source_embeddings, dtype=float))
    B = np.atleast_2d(np.asarray(target_embeddings, dtype=float))
    if A.shape[0] < 1 or B.shape[0] < 1 or A.shape[1] != B.shape[1]:
        raise ValueError(f"incompatible embeddings {A.shape} and {B.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise ValueError("non-finite embeddings")
    M = A @ B.T
    Pab = softmax_rows(M)
    Pba = softmax_rows(M.T)
    return AssociationMatrices(M, Pab, Pba, Pab @ Pba)


def target_distribution(labels) -> np.ndarray:
    y = np.asarray(labels)
    same = (y[:, None] == y[None, :]).astype(float)
    return same / same.sum(axis=1, keepdims=True)


def walker_loss(Paba, source_labels) -> float:
    T = target_distribution(source_labels)
    return float(-(T * np.log(Paba + EPS)).sum() / T.shape[0])


def visit_loss(Pab) -> float:
    visit = Pab.mean(axis=0)
    return float(-np.log(visit + EPS).mean())


def classification_loss(source_embeddings, head, labels, bias=None) -> float:
    A = np.asarray(source_embeddings, dtype=float)
    y = np.asarray(labels)
    n_classes = head.shape[0]
    if np.any((y < 0) | (y >= n_classes)):
        raise ValueError("label outside [0, K)")
    logits = A @ head.T + (0.0 if bias is None else bias)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def total_loss(model: EmbeddingModel, source_batch, source_labels, target_batch
               ) -> Tuple[float, Dict[str, float]]:
    """L = L_s + lambda_w L_w + lambda_v L_v, with the per-term breakdown."""
    A = embed(model, source_batch)
    B = embed(model, target_batch)
    assoc = association(A, B)
    terms = {
        "L_s": classification_loss(A, model.head, source_labels, model.bias),
        "L_w": walker_loss(assoc.Paba, source_labels),
        "L_v": visit_loss(assoc.Pab),
    }
    hp = model.hyper
    total = terms["L_s"] + hp.lambda_w * terms["L_w"] + hp.lambda_v * terms["L_v"]
    return total, terms


def _softmax_backward(P, dP):
    return P * (dP - (dP * P).sum(axis=1, keepdims=True))


def loss_and_gradients(model: EmbeddingModel, Xs, ys, Xt):
    """Total loss, term breakdown and analytic gradients (dW, dhead, dbias)."""
    Xs = np.asarray(Xs, dtype=float)
    Xt = np.asarray(Xt, dtype=float)
    ys = np.asarray(ys)
    hp = model.hyper
    n_s, n_t = Xs.shape[0], Xt.shape[0]
    A = Xs @ model.W.T
    B = Xt @ model.W.T

    # source classification
    logits = A @ model.head.T + model.bias
    probs = softmax_rows(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n_s), ys] = 1.0
    z = logits - logits.max(axis=1, keepdims=True)
    L_s = float(-(z[np.arange(n_s), ys] - np.log(np.exp(z).sum(axis=1))).mean())
    G = (probs - onehot) / n_s
    d_head = G.T @ A
    d_bias = G.sum(axis=0)
    dA = G @ model.head

    # association
    M = A @ B.T
    Pab = softmax_rows(M)
    Pba = softmax_rows(M.T)
    visit = Pab.mean(axis=0)
    L_v = float(-np.log(visit + EPS).mean())
    dPab = np.empty_like(Pab)
    dPba = np.empty_like(Pba)
    dPab[:] = (-hp.lambda_v / n_t / (visit + EPS) / n_s)[None, :]
    # T is zero off the same-category blocks, so only those blocks of Paba matter
    walk = 0.0
    for c in np.unique(ys):
        idx = np.flatnonzero(ys == c)
        P_ab, P_ba = Pab[idx], Pba[:, idx]
        block = P_ab @ P_ba
        walk += np.log(block + EPS).sum() / len(idx)
        d_block = (-hp.lambda_w / (n_s * len(idx))) / (block + EPS)
        dPab[idx] += d_block @ P_ba.T
        dPba[:, idx] = P_ab.T @ d_block
    L_w = float(-walk / n_s)
    dM = _softmax_backward(Pab, dPab) + _softmax_backward(Pba, dPba).T
    dA += dM @ B
    dB = dM.T @ A
    dW = dA.T @ Xs + dB.T @ Xt

    total = L_s + hp.lambda_w * L_w + hp.lambda_v * L_v
    return total, {"L_s": L_s, "L_w": L_w, "L_v": L_v}, (dW, d_head, d_bias)


def gradients(model: EmbeddingModel, Xs, ys, Xt):
    return loss_and_gradients(model, Xs, ys, Xt)[2]


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: EmbeddingModel                           # lowest-objective parameters
    checkpoints: List[Tuple[int, EmbeddingModel]]   # (epoch, snapshot)
    final_terms: Dict[str, float]
    epochs_run: int


def train(Xs, ys, Xt, hyper: Hyperparams = Hyperparams(), normalizer: Optional[Normalizer] = None
          ) -> TrainResult:
    """Full-batch Adam on the total loss with patience-based early stopping.

    Returns the lowest-objective parameters; if ``hyper.checkpoint_every`` is
    set, snapshots taken every that many epochs are returned as well.
    """
    Xs = np.asarray(Xs, dtype=float)
    Xt = np.asarray(Xt, dtype=float)
    ys = np.asarray(ys, dtype=int)
    if Xs.shape[0] == 0 or Xt.shape[0] == 0:
        raise ValueError("source and target batches must be non-empty")
    if set(np.unique(ys)) != set(range(K)):
        raise ValueError("every category must be present in the source batch")
    model = init_model(hyper, Xs.shape[1])
    model.normalizer = normalizer
    params = [model.W, model.head, model.bias]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    best = math.inf
    best_params = [p.copy() for p in params]
    best_terms: Dict[str, float] = {}
    since_best = 0
    curve: List[float] = []
    checkpoints = []
    epoch = 0
    for epoch in range(1, hyper.max_epochs + 1):
        loss, terms, grads = loss_and_gradients(model, Xs, ys, Xt)
        if not math.isfinite(loss):
            raise TrainingError(f"loss became non-finite at epoch {epoch}: {terms}")
        curve.append(loss)
        if loss < best - 1e-12:
            best, since_best = loss, 0
            best_params = [p.copy() for p in params]
            best_terms = terms
        else:
            since_best += 1
        if since_best >= hyper.patience:
            break
        for k, (p, g) in enumerate(zip(params, grads)):
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            mh = m[k] / (1 - b1 ** epoch)
            vh = v[k] / (1 - b2 ** epoch)
            p -= hyper.learning_rate * mh / (np.sqrt(vh) + adam_eps)
        if hyper.checkpoint_every and epoch % hyper.checkpoint_every == 0:
            snap = EmbeddingModel(model.W.copy(), model.head.copy(), model.bias.copy(), hyper,
                                  normalizer)
            checkpoints.append((epoch, _with_bank(snap, Xs, ys)))
    final = EmbeddingModel(*best_params, hyper=hyper, normalizer=normalizer, curve=curve)
    if not best_terms:
        _, best_terms = total_loss(final, Xs, ys, Xt)
    return TrainResult(_with_bank(final, Xs, ys), checkpoints, best_terms, epoch)


def _with_bank(model: EmbeddingModel, Xs, ys) -> EmbeddingModel:
    model.bank = embed(model, Xs)
    model.bank_labels = np.asarray(ys, dtype=int).copy()
    return model


# ---------------------------------------------------------------------------
# Prediction


def category_masses(model: EmbeddingModel, bank, bank_labels, target_features) -> np.ndarray:
    """Per-category association mass for each target row (rows sum to 1)."""
    bank = np.atleast_2d(np.asarray(bank, dtype=float))
    labels = np.asarray(bank_labels, dtype=int)
    if bank.shape[0] == 0:
        raise ValueError("empty source bank")
    B = np.atleast_2d(embed(model, target_features))
    Pba = softmax_rows(B @ bank.T)
    masses = np.zeros((B.shape[0], model.head.shape[0]))
    for c in range(masses.shape[1]):
        masses[:, c] = Pba[:, labels == c].sum(axis=1)
    return masses


def predict(model: EmbeddingModel, target_features, bank=None, bank_labels=None
            ) -> Tuple[np.ndarray, np.ndarray]:
    """Category indices and per-category scores for target feature rows.

    Ties go to the lowest category index (``argmax`` returns the first maximum).
    """
    if bank is None:
        bank, bank_labels = model.bank, model.bank_labels
    if bank is None:
        raise ValueError("model has no source bank")
    scores = category_masses(model, bank, bank_labels, target_features)
    return scores.argmax(axis=1), scores


# ---------------------------------------------------------------------------
# Serialization


def model_to_dict(model: EmbeddingModel) -> dict:
    curve = model.curve
    return {
        "format": "gridfault-apl-model/1",
        "d": model.d,
        "K": int(model.head.shape[0]),
        "D": int(model.W.shape[1]),
        "categories": list(CATEGORIES),
        "W": model.W.ravel().tolist(),
        "head": model.head.ravel().tolist(),
        "bias": model.bias.tolist(),
        "hyper": dataclasses.asdict(model.hyper),
        "normalizer": None if model.normalizer is None else model.normalizer.to_dict(),
        "curve": {"epochs": len(curve), "first": curve[0] if curve else None,
                  "last": curve[-1] if curve else None, "best": min(curve) if curve else None},
        "bank": None if model.bank is None else model.bank.ravel().tolist(),
        "bank_labels": None if model.bank_labels is None else model.bank_labels.tolist(),
    }


def model_from_dict(d: dict) -> EmbeddingModel:
    dim, k, n_feat = d["d"], d["K"], d["D"]
    model = EmbeddingModel(
        W=np.array(d["W"], dtype=float).reshape(dim, n_feat),
        head=np.array(d["head"], dtype=float).reshape(k, dim),
        bias=np.array(d["bias"], dtype=float),
        hyper=Hyperparams(**d["hyper"]),
        normalizer=None if d.get("normalizer") is None else Normalizer.from_dict(d["normalizer"]),
    )
    if d.get("bank") is not None:
        model.bank = np.array(d["bank"], dtype=float).reshape(-1, dim)
        model.bank_labels = np.array(d["bank_labels"], dtype=int)
    return model


def save_model(model: EmbeddingModel, path: str) -> None:
    _atomic_write(path, json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path: str) -> EmbeddingModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
