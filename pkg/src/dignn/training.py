"""Adam training loop and evaluation for :class:`DIGNNModel`."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .model import (
    DIGNNModel,
    accuracy,
    backward,
    forward,
    loss_cross_entropy,
    update_running_stats,
)


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.0
    hidden: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    val_loss: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainReport:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("nan")
    best_val_loss: float = float("nan")
    test_acc: float = float("nan")

    def to_dict(self):
        return {
            "best_epoch": self.best_epoch,
            "best_val_acc": self.best_val_acc,
            "best_val_loss": self.best_val_loss,
            "test_acc": self.test_acc,
            "history": [asdict(m) for m in self.history],
        }


class Adam:
    """Adam with decoupled weight decay, updating arrays in place."""

    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _snapshot(model):
    state = {k: v.copy() for k, v in model.parameters().items()}
    if model.norm is not None:
        state["_running_mean"] = model.norm.running_mean.copy()
        state["_running_var"] = model.norm.running_var.copy()
    return state


def _restore(model, state):
    for k, v in model.parameters().items():
        v[...] = state[k]
    if model.norm is not None:
        model.norm.running_mean[...] = state["_running_mean"]
        model.norm.running_var[...] = state["_running_var"]


def _logits(model, ds, **kw):
    logits, _ = forward(model, ds.graph, ds.features, graph_index=ds.graph_index, **kw)
    return logits


def evaluate(model: DIGNNModel, ds: Dataset, split: str = "test", max_iter=None) -> float:
    """Accuracy on ``split`` in inference mode."""
    logits = _logits(model, ds, training=False, max_iter=max_iter)
    return accuracy(logits, ds.labels, np.flatnonzero(ds.mask(split)))


def train(model: DIGNNModel, ds: Dataset, cfg: TrainConfig, on_epoch=None) -> TrainReport:
    """Full-batch training; restores the parameters with the best validation accuracy.

    ``on_epoch`` receives each :class:`EpochMetrics` as it is produced. Epochs
    are ranked by validation accuracy, then by lower validation loss; the
    earlier epoch wins a full tie. Without a validation split the training
    metrics stand in.
    """
    model.dropout = cfg.dropout
    report = TrainReport()
    if cfg.epochs == 0:
        return report
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    train_idx = np.flatnonzero(ds.train_mask)
    has_val = bool(ds.val_mask.any())
    best = None
    for epoch in range(1, cfg.epochs + 1):
        logits, cache = forward(model, ds.graph, ds.features, training=True, rng=rng,
                                graph_index=ds.graph_index)
        loss = loss_cross_entropy(logits, ds.labels, ds.train_mask)
        grads = backward(model, cache, ds.labels, ds.train_mask)
        update_running_stats(model, cache)
        opt.step(grads.params)
        train_acc = accuracy(logits, ds.labels, train_idx)
        if has_val:
            val_logits = _logits(model, ds, training=False)
            val_acc = accuracy(val_logits, ds.labels, np.flatnonzero(ds.val_mask))
            val_loss = loss_cross_entropy(val_logits, ds.labels, ds.val_mask)
        else:
            val_acc, val_loss = train_acc, loss
        m = EpochMetrics(epoch, loss, train_acc, val_acc, val_loss)
        report.history.append(m)
        if on_epoch is not None:
            on_epoch(m)
        if best is None or (val_acc, -val_loss) > (report.best_val_acc, -report.best_val_loss):
            report.best_epoch, report.best_val_acc, report.best_val_loss = epoch, val_acc, val_loss
            best = _snapshot(model)
    _restore(model, best)
    if ds.test_mask.any():
        report.test_acc = evaluate(model, ds, "test")
    return report
