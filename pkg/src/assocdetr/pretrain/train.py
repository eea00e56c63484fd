"""Background-classification pretraining loop and metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import ops
from ..autodiff.module import Linear
from ..autodiff.tensor import Tape, Tensor, backward, no_grad
from ..background import CLASS_NAMES, BackgroundClassifier
from .optim import AdamW

NUM_CLASSES = len(CLASS_NAMES)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.2
    hflip: bool = True  # mirror each training sample with probability 1/2
    schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for ``step`` of ``total``; cosine decays to zero at the last step."""
        if self.schedule == "constant" or total <= 1:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float

    def line(self) -> str:
        return f"{self.epoch},{self.split},{self.loss:.6f},{self.accuracy:.6f}"


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows: true class, cols: predicted
    loss: float = float("nan")


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    initial_loss: float = float("nan")
    val: EvalResult = None
    steps: int = 0


def stack_pixels(patches) -> np.ndarray:
    """N x 3 x P x P batch, each patch standardized to zero mean and unit variance."""
    x = np.stack([p.pixels for p in patches])
    mu = x.mean(axis=(1, 2, 3), keepdims=True)
    sd = x.std(axis=(1, 2, 3), keepdims=True)
    return (x - mu) / np.maximum(sd, 1e-6)


def labels_of(patches) -> np.ndarray:
    return np.array([p.label.id for p in patches], dtype=np.int64)


def stratified_split(labels: np.ndarray, val_fraction: float, seed: int):
    """Per-class shuffled split; returns sorted (train_idx, val_idx)."""
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_val = max(1, int(round(len(idx) * val_fraction))) if len(idx) > 1 else 0
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def confusion_matrix(true, pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def evaluate_predictions(true, pred, num_classes: int = NUM_CLASSES) -> EvalResult:
    true = np.asarray(true)
    if true.size == 0:
        raise ValueError("cannot evaluate an empty corpus")
    cm = confusion_matrix(true, pred, num_classes)
    return EvalResult(float(np.trace(cm)) / true.size, cm)


def _stem_features(classifier: BackgroundClassifier, pixels: np.ndarray, batch: int = 64) -> np.ndarray:
    """Frozen shared-stem activations, computed once per corpus."""
    classifier.backbone.eval()
    out = []
    with no_grad():
        for s in range(0, len(pixels), batch):
            out.append(classifier.backbone(Tensor(pixels[s:s + batch])).data)
    return np.concatenate(out)


def _logits(classifier, feats: np.ndarray) -> Tensor:
    return classifier.logits_from_features(classifier.bam(Tensor(feats)))


def _eval_features(classifier, feats, labels, batch: int = 64) -> EvalResult:
    classifier.bam.eval()
    preds, total = [], 0.0
    with no_grad():
        for s in range(0, len(feats), batch):
            lg = _logits(classifier, feats[s:s + batch])
            total += ops.cross_entropy(lg, labels[s:s + batch]).item() * len(lg.data)
            preds.append(lg.data.argmax(axis=1))
    res = evaluate_predictions(labels, np.concatenate(preds))
    res.loss = total / len(feats)
    return res


def evaluate(classifier: BackgroundClassifier, corpus) -> EvalResult:
    if not corpus:
        raise ValueError("cannot evaluate an empty corpus")
    feats = _stem_features(classifier, stack_pixels(corpus))
    return _eval_features(classifier, feats, labels_of(corpus))


def trainable_parameters(classifier: BackgroundClassifier):
    """BAM and head only; the shared stem belongs to the detector backbone."""
    return [p for n, p in classifier.named_parameters() if not n.startswith("backbone.")]


def train(classifier: BackgroundClassifier, corpus, cfg: TrainConfig = TrainConfig(), log=None) -> TrainResult:
    """Train BAM + head by cross-entropy with AdamW; the shared stem stays frozen.

    ``log`` receives each MetricRecord as it is produced.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    labels = labels_of(corpus)
    train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)
    pixels = stack_pixels(corpus)
    feats = _stem_features(classifier, pixels)
    feats_flip = _stem_features(classifier, pixels[..., ::-1].copy()) if cfg.hflip else None
    opt = AdamW(trainable_parameters(classifier), cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    result = TrainResult()
    step = 0
    per_epoch = sum(1 for s in range(0, len(train_idx), cfg.batch_size) if len(train_idx) - s >= 2)
    total_steps = per_epoch * cfg.epochs
    for epoch in range(1, cfg.epochs + 1):
        classifier.bam.train()
        order = train_idx[rng.permutation(len(train_idx))]
        seen, loss_sum, correct = 0, 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:  # batch statistics need at least two samples
                continue
            batch = feats[idx]
            if feats_flip is not None:
                flip = rng.random(len(idx)) < 0.5
                batch = np.where(flip[:, None, None, None], feats_flip[idx], batch)
            opt.zero_grad()
            with Tape() as tape:
                lg = _logits(classifier, batch)
                loss = ops.cross_entropy(lg, labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(step, value)
            if step == 0:
                result.initial_loss = value
            backward(loss, tape)
            opt.lr = cfg.lr_at(step, total_steps)
            opt.step()
            step += 1
            seen += len(idx)
            loss_sum += value * len(idx)
            correct += int((lg.data.argmax(axis=1) == labels[idx]).sum())
        rec = MetricRecord(epoch, "train", loss_sum / max(seen, 1), correct / max(seen, 1))
        result.metrics.append(rec)
        if log:
            log(rec)
        if len(val_idx):
            result.val = _eval_features(classifier, feats[val_idx], labels[val_idx])
            rec = MetricRecord(epoch, "val", result.val.loss, result.val.accuracy)
            result.metrics.append(rec)
            if log:
                log(rec)
    result.steps = step
    return result


def linear_probe(corpus, cfg: TrainConfig = TrainConfig(), epochs: int = 200, lr: float = 1e-2) -> EvalResult:
    """Softmax regression on raw pixels, same split as ``train``; a separability baseline."""
    labels = labels_of(corpus)
    train_idx, val_idx = stratified_split(labels, cfg.val_fraction, cfg.seed)
    x = stack_pixels(corpus).reshape(len(corpus), -1)
    head = Linear(x.shape[1], NUM_CLASSES, rng=np.random.default_rng(cfg.seed), std=0.01)
    opt = AdamW(head.parameters(), lr, weight_decay=cfg.weight_decay)
    xt = Tensor(x[train_idx])
    for _ in range(epochs):
        opt.zero_grad()
        with Tape() as tape:
            loss = ops.cross_entropy(head(xt), labels[train_idx])
        backward(loss, tape)
        opt.step()
    with no_grad():
        pred = head(Tensor(x[val_idx])).data.argmax(axis=1)
    return evaluate_predictions(labels[val_idx], pred)
