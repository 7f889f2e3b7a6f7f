"""Epoch loop, evaluation, and history output."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClipSet
from .errors import ConfigError, NumericError
from .model import ModelGraph, save_weights
from .training import OptimizerState, categorical_cross_entropy, metrics, model_step, one_hot

log = logging.getLogger(__name__)

METRICS = ("loss", "accuracy", "recall", "auc")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0
    workers: int = 1

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(self.optimizer, self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)  # one dict per epoch: {"train": {...}, "validation": {...}}
    best_epoch: int | None = None
    best_state: dict | None = None
    wall_time: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "split", "metric", "value"])
        for epoch, rec in enumerate(self.records, start=1):
            for split in ("train", "validation"):
                for name in METRICS:
                    value = rec[split].get(name)
                    writer.writerow([epoch, split, name, "" if value is None else repr(float(value))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "final": self.records[-1] if self.records else None,
            "wall_time_s": self.wall_time,
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.csv").write_text(self.to_csv(), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")


def predict_proba(model: ModelGraph, data: ClipSet, batch_size: int = 4, workers: int = 1) -> np.ndarray:
    out = [model.forward(x) for x, _, _ in data.batches(batch_size, None, workers)]
    return np.concatenate(out) if out else np.zeros((0, 2), dtype=np.float32)


def evaluate(model: ModelGraph, data: ClipSet, batch_size: int = 4, workers: int = 1) -> dict:
    """Loss and metrics over ``data`` without touching any parameter."""
    probs = predict_proba(model, data, batch_size, workers)
    labels = data.labels()
    loss, _ = categorical_cross_entropy(probs, one_hot(labels, probs.shape[1], probs.dtype))
    return {"loss": loss, **metrics(probs, labels)}


def train_loop(model: ModelGraph, train: ClipSet, validation: ClipSet | None, config: TrainConfig,
               checkpoint_path=None) -> TrainHistory:
    """Train for ``config.epochs`` epochs, keeping the weights with the best validation accuracy.

    Accuracy ties are broken by the lower validation loss. Without a
    validation segment the training metrics are used instead.

    Training metrics are computed from the predictions made during the epoch
    (before each batch's update), gathered back into dataset order.
    """
    if len(train) == 0:
        raise ConfigError("training segment is empty")
    if config.epochs < 1 or config.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    opt = config.optimizer_state()
    history = TrainHistory()
    best_key = (-1.0, 0.0)
    start = time.perf_counter()
    labels = train.labels()
    index_of = {cid: k for k, cid in enumerate(train.ids())}
    for epoch in range(1, config.epochs + 1):
        probs = np.zeros((len(train), model.head.dout), dtype=np.float64)
        shuffle_seed = config.seed * 100003 + epoch
        for bidx, (x, y, ids) in enumerate(train.batches(config.batch_size, shuffle_seed, config.workers)):
            model.zero_grad()
            p = model.forward(x)
            if not np.all(np.isfinite(p)):
                raise NumericError(f"non-finite output at epoch {epoch}, batch {bidx}")
            loss, grad_logits = categorical_cross_entropy(p, y.astype(p.dtype))
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bidx}")
            model.backward_from_logits(grad_logits)
            model_step(opt, model)
            probs[[index_of[c] for c in ids]] = p
        train_loss, _ = categorical_cross_entropy(probs, one_hot(labels, probs.shape[1], probs.dtype))
        record = {"train": {"loss": train_loss, **metrics(probs, labels)}}
        if validation is not None and len(validation):
            record["validation"] = evaluate(model, validation, config.batch_size, config.workers)
        else:
            record["validation"] = {}
        history.records.append(record)
        # best validation accuracy; ties go to the lower validation loss
        scored = record["validation"] or record["train"]
        key = (scored["accuracy"], -scored["loss"])
        if key > best_key:
            best_key = key
            history.best_epoch = epoch
            history.best_state = model.state_dict()
            if checkpoint_path is not None:
                save_weights(model, checkpoint_path)
        log.info("epoch %d: train %s | validation %s", epoch, _fmt(record["train"]), _fmt(record["validation"]))
    history.wall_time = time.perf_counter() - start
    return history


def _fmt(rec: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in rec.items() if v is not None)


