"""Mini-batch training, evaluation and confusion matrices."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import InvalidArgument, NumericalFailure
from .model import ModelConfig
from .regularization import RegularizerWeights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    schedule: str = "cosine"
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    regs: RegularizerWeights = field(default_factory=RegularizerWeights)
    freeze_optical: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgument("batch size and epochs must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgument(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise InvalidArgument(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_ce: list[float] = field(default_factory=list)
    heldout_accuracy: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")

    def rows(self) -> list[dict]:
        out = []
        for i, loss in enumerate(self.epoch_loss):
            acc = self.heldout_accuracy[i] if i < len(self.heldout_accuracy) else float("nan")
            out.append({"epoch": i + 1, "loss": loss, "ce": self.epoch_ce[i], "heldout_accuracy": acc})
        return out


class Adam:
    """Adam with bias correction; state keyed like the parameter dict."""

    def __init__(self, params: dict, cfg: TrainConfig, keys=None):
        self.cfg = cfg
        self.keys = list(params) if keys is None else list(keys)
        self.m = {k: np.zeros_like(params[k]) for k in self.keys}
        self.v = {k: np.zeros_like(params[k]) for k in self.keys}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for k in self.keys:
            g = grads[k]
            if c.optimizer == "sgd":
                params[k] -= (lr * g).astype(params[k].dtype)
                continue
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = lr * (m / b1t) / (np.sqrt(v / b2t) + c.adam_eps)
            params[k] -= update.astype(params[k].dtype)


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * step / total))


def _check_dataset(inputs: np.ndarray, labels: np.ndarray) -> None:
    if len(inputs) == 0:
        raise InvalidArgument("dataset is empty")
    if len(inputs) != len(labels):
        raise InvalidArgument(f"{len(inputs)} inputs but {len(labels)} labels")


def train(
    config: ModelConfig,
    train_cfg: TrainConfig,
    images: np.ndarray,
    labels: np.ndarray,
    heldout: tuple[np.ndarray, np.ndarray] | None = None,
    params: dict | None = None,
    features: np.ndarray | None = None,
):
    """Train ``config`` on (images, labels). Returns ``(params, TrainReport)``.

    With ``train_cfg.freeze_optical`` only the electronic backend is updated;
    ``features`` may then supply precomputed (e.g. optically simulated) stem
    features in place of the electronic stem. Runs are bit-reproducible for a
    fixed seed: batches are drawn from a seeded permutation and reductions
    happen in a fixed order.
    """
    _check_dataset(images if features is None else features, labels)
    if params is None:
        params = model.init_params(config, seed=train_cfg.seed)
    else:
        params = {k: v.copy() for k, v in params.items()}
    labels = np.asarray(labels)

    frozen = train_cfg.freeze_optical
    if frozen:
        keys = [k for k in params if not model.is_optical(k)]
        if features is None:
            features = _batched_features(params, config, images)
    else:
        keys = list(params)
    opt = Adam(params, train_cfg, keys)
    rng = np.random.default_rng([train_cfg.seed, 2])
    n = len(labels)
    per_epoch = math.ceil(n / train_cfg.batch_size)
    total = per_epoch * train_cfg.epochs
    report = TrainReport()
    step = 0

    def batch_loss(idx):
        if frozen:
            return model.backend_loss_and_grads(params, config, features[idx], labels[idx])
        return model.loss_and_grads(params, config, images[idx], labels[idx], train_cfg.regs)

    report.initial_loss = batch_loss(np.arange(min(n, train_cfg.batch_size)))[0]
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        tot, tot_ce = 0.0, 0.0
        for b in range(per_epoch):
            idx = np.sort(order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size])
            loss, grads, parts = batch_loss(idx)
            if not np.isfinite(loss):
                raise NumericalFailure(f"training loss became non-finite at epoch {epoch + 1}, step {step}")
            opt.step(params, grads, _lr_at(train_cfg, step, total))
            step += 1
            tot += loss * len(idx)
            tot_ce += parts["ce"] * len(idx)
        report.epoch_loss.append(tot / n)
        report.epoch_ce.append(tot_ce / n)
        if heldout is not None:
            h_feats = heldout[2] if frozen and len(heldout) > 2 else None
            acc, _ = evaluate(params, config, heldout[0], heldout[1], features=h_feats)
            report.heldout_accuracy.append(acc)
        logger.info(
            "epoch %d/%d loss=%.4f ce=%.4f%s", epoch + 1, train_cfg.epochs, report.epoch_loss[-1],
            report.epoch_ce[-1], f" acc={report.heldout_accuracy[-1]:.4f}" if heldout is not None else "",
        )
    return params, report


def _batched_features(params, config, images, batch=256):
    out = []
    for s in range(0, len(images), batch):
        f, _ = model.stem_forward(params, config, images[s : s + batch])
        out.append(f)
    return np.concatenate(out)


def predict(params: dict, config: ModelConfig, images=None, features=None, batch: int = 256) -> np.ndarray:
    """Arg-max class per sample; ties resolve to the lowest class index."""
    source = images if features is None else features
    preds = []
    for s in range(0, len(source), batch):
        if features is None:
            logits = model.forward(params, config, images[s : s + batch])
        else:
            logits, _ = model.backend_forward(params, config, features[s : s + batch])
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, classes: int) -> np.ndarray:
    """Counts with rows indexed by true class and columns by prediction."""
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def evaluate(params: dict, config: ModelConfig, images, labels, features=None):
    """Accuracy and confusion matrix. ``features`` bypasses the electronic stem."""
    labels = np.asarray(labels)
    preds = predict(params, config, images, features)
    cm = confusion_matrix(labels, preds, config.classes)
    acc = float(np.trace(cm) / max(len(labels), 1))
    return acc, cm
