"""Loss, optimizers and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError

REAL, FAKE = 0, 1
CLASS_NAMES = ("REAL", "FAKE")
CE_EPS = 1e-12


def categorical_cross_entropy(probs: np.ndarray, onehot: np.ndarray, eps: float = CE_EPS):
    """Mean cross-entropy and its gradient w.r.t. the pre-softmax logits.

    The returned gradient assumes ``probs`` came out of a softmax, so it is the
    fused ``(probs - onehot) / B``.
    """
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise DimensionError(f"probs {probs.shape} and labels {onehot.shape} must be equal [B, K]")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise ArgumentError("probability rows must sum to 1")
    bsz = probs.shape[0]
    picked = np.sum(onehot * np.log(probs.astype(np.float64) + eps), axis=1)
    loss = float(-picked.mean())
    return loss, ((probs - onehot) / bsz).astype(probs.dtype)


def one_hot(labels, num_classes: int = 2, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ArgumentError(f"optimizer must be 'sgd' or 'adam', got {self.kind!r}")


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """Update ``params`` in place from ``grads`` (both keyed by tensor name)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        if params[name].shape != g.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name] -= (state.lr * g).astype(params[name].dtype)
        return
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)


def model_step(state: OptimizerState, model) -> None:
    """Apply one optimizer update to every parameter of a layer stack."""
    params, grads = {}, {}
    for layer in model.layers:
        for key in layer.params:
            params[f"{layer.name}/{key}"] = layer.params[key]
            grads[f"{layer.name}/{key}"] = layer.grads[key]
    optimizer_step(state, params, grads)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC of ``scores`` for the positive label 1; ties count one half.

    Returns ``None`` when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = np.sort(scores[labels != 1])
    if pos.size == 0 or neg.size == 0:
        return None
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # twice the U statistic, kept integral so the ratio is exact
    twice_u = int(np.sum(2 * below + (at_or_below - below)))
    return twice_u / (2.0 * pos.size * neg.size)


def metrics(probs: np.ndarray, labels) -> dict:
    """Accuracy, recall and AUC with FAKE as the positive class."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.size or probs.shape[0] < 1:
        raise DimensionError(f"probs {probs.shape} do not match {labels.size} labels")
    pred = np.argmax(probs, axis=1)
    cm = confusion_matrix(pred, labels, probs.shape[1])
    n = int(cm.sum())
    tp, fn = int(cm[FAKE, FAKE]), int(cm[FAKE, REAL])
    return {
        "accuracy": float(np.trace(cm)) / n,
        "recall": tp / (tp + fn) if tp + fn else None,
        "auc": roc_auc(probs[:, FAKE], labels),
    }
