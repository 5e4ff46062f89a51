"""Mixer-only fine-tuning: bases stay frozen, per-layer mixers (and optionally the head) train."""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError
from .numerics import cross_entropy
from .optim import make_optimizer
from .toy import CrispLinear, ToyMLP, run_epochs

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    train_head: bool = True
    train_bias: bool = False
    optimizer: str = "sgd"
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"adapt lr must be >= 0, got {self.lr}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and patience >= 1 are required")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def trainable_budget(model, cfg=None):
    """Number of parameters adaptation will touch: every mixer, plus the head if enabled."""
    cfg = cfg or AdaptConfig()
    return model.trainable_count("adapt", cfg.train_head, cfg.train_bias)


def mixers_of(model):
    return {l.name: l.group.mixers[l.name] for l in model.layers if isinstance(l, CrispLinear)}


def evaluate(model, x, y):
    logits, _ = model.forward(x)
    loss, _ = cross_entropy(logits, y)
    return loss, float((np.argmax(logits, axis=1) == y).mean())


def adapt(model, dataset, cfg=None):
    """Fine-tune ``model`` in place on ``dataset``; returns ``(mixers, metrics rows)``.

    Only the tensors listed by ``model.parameters("adapt", ...)`` move.  After
    training the parameters from the epoch with the lowest validation loss are
    restored.  Metric rows are ``{epoch, split, loss, accuracy}``; epoch 0 is
    the model before any update.
    """
    cfg = cfg or AdaptConfig()
    x, y = dataset.x_train, dataset.y_train
    if len(x) == 0:
        raise ConfigError("cannot adapt on an empty dataset")
    params = model.parameters("adapt", cfg.train_head, cfg.train_bias)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    rows = []

    def record(epoch):
        for split, xs, ys in (("train", x, y), ("val", dataset.x_val, dataset.y_val)):
            loss, acc = evaluate(model, xs, ys)
            rows.append({"epoch": epoch, "split": split, "loss": loss, "accuracy": acc})
        return rows[-1]["loss"]

    best = {"loss": record(0), "snap": {k: v.copy() for k, v in params.items()}, "wait": 0}

    def batch_loss(idx):
        logits, _ = model.forward(x[idx])
        loss, g = cross_entropy(logits, y[idx])
        return loss, model.backward(g, mode="adapt", train_head=cfg.train_head, train_bias=cfg.train_bias)

    def on_epoch(epoch, _):
        val = record(epoch + 1)
        if val < best["loss"]:
            best.update(loss=val, snap={k: v.copy() for k, v in params.items()}, wait=0)
            return False
        best["wait"] += 1
        if best["wait"] >= cfg.patience:
            log.info("early stop after epoch %d (best val loss %.6g)", epoch + 1, best["loss"])
            return True
        return False

    if cfg.epochs > 0 and params:
        run_epochs(len(x), batch_loss, params, opt, cfg.epochs, cfg.batch_size, cfg.seed, on_epoch=on_epoch)
        for k, v in params.items():
            v[...] = best["snap"][k]
    return mixers_of(model), rows


class MixerAdapter(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`adapt` for a bank-backed model.

    ``fit(X, y)`` adapts a private copy of the bank; the validation split is
    the last ``validation_fraction`` of the rows (no shuffling).
    """

    def __init__(self, bank=None, lr=0.05, epochs=30, batch_size=32, train_head=True, train_bias=False,
                 optimizer="sgd", patience=10, validation_fraction=0.2, random_state=0):
        self.bank = bank
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.train_head = train_head
        self.train_bias = train_bias
        self.optimizer = optimizer
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        from .toy import Dataset

        if self.bank is None:
            raise ConfigError("MixerAdapter needs a FactorBank")
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y)
        n_val = max(1, int(round(len(X) * self.validation_fraction))) if len(X) > 1 else 0
        cut = len(X) - n_val
        xv, yv = (X[cut:], y[cut:]) if n_val else (X, y)
        data = Dataset(X[:cut], y[:cut], xv, yv, X[:0], y[:0])
        self.model_ = ToyMLP.from_bank(self.bank.copy())
        cfg = AdaptConfig(self.lr, self.epochs, self.batch_size, self.train_head, self.train_bias,
                          self.optimizer, self.patience, self.random_state)
        self.mixers_, self.history_ = adapt(self.model_, data, cfg)
        self.classes_ = np.arange(self.model_.head.shape[0])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(np.asarray(X, dtype=np.float32))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(np.asarray(X, dtype=np.float32))
