"""Source training and per-task adaptation.

The objective is softmax cross-entropy plus an orthogonality penalty on
the task's factor matrices. Optimisation is momentum SGD with coupled
weight decay and a step learning-rate schedule.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .errors import ConfigError, DivergenceError, FrozenParameterError
from .network import Model, forward, make_rng, predict, set_trainable, trainable_params
from .tucker import TaskFactorSet

logger = logging.getLogger(__name__)

LAMBDA_SWEEP = (0.1, 0.01, 0.001)
LAMBDA_CHOICES = (0.0,) + LAMBDA_SWEEP
WEIGHT_DECAY_RANGE = (1e-5, 5e-3)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    lr_step: int = 30
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lambda_orth: float = 1e-3
    orth_in_source: bool = True
    orth_in_adapt: bool = True
    batch_size: int = 32
    augment: bool = True
    crop_padding: int = 2
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Short schedule for the desk preset (lr 0.1 diverges at this scale)."""
        params = dict(epochs=10, lr=0.01, lr_step=8)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name == "default":
            return cls(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ConfigError(f"unknown training preset {name!r}")

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr_step < 1:
            raise ConfigError("epochs must be >= 0, batch_size and lr_step >= 1")
        if self.lr < 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be >= 0 and lr_decay in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        lo, hi = WEIGHT_DECAY_RANGE
        if not lo <= self.weight_decay <= hi:
            raise ConfigError(f"weight_decay {self.weight_decay:g} outside [{lo:g}, {hi:g}]")
        if self.lambda_orth not in LAMBDA_CHOICES:
            raise ConfigError(f"lambda_orth must be one of {LAMBDA_CHOICES}, got {self.lambda_orth:g}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step)


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    orth_loss: float

    def to_line(self) -> str:
        return (f"epoch={self.epoch} split={self.split} loss={self.loss:.6f} "
                f"accuracy={self.accuracy:.4f} orth_loss={self.orth_loss:.6g}")


@dataclass
class TrainResult:
    task_id: str
    mode: str
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.history if r.split == "train"]

    @property
    def final_accuracy(self) -> float:
        train = [r for r in self.history if r.split == "train"]
        return train[-1].accuracy if train else float("nan")


def orthogonality_loss(factors, lam: float) -> ad.Node:
    """``lam * sum_k ||F_k^T F_k - I||_F^2`` over the given factor matrices."""
    mats = factors.factors if isinstance(factors, TaskFactorSet) else factors
    total = ad.constant(0.0)
    for f in mats:
        f = ad.constant(f)
        gram = ad.matmul(ad.transpose(f), f)
        total = total + ad.frobenius_sq(gram - np.eye(f.shape[1]))
    return ad.scale(total, lam)


def task_orthogonality(model: Model, task_id: str, lam: float) -> ad.Node:
    total = ad.constant(0.0)
    for fs in model.task(task_id).factors:
        total = total + orthogonality_loss(fs, lam)
    return total


def augment_batch(images: np.ndarray, rng: np.random.Generator, padding: int) -> np.ndarray:
    """Random horizontal flip and random crop after zero padding."""
    n, _, h, w = images.shape
    flip = rng.random(n) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    if padding:
        padded = np.pad(out, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        offs = rng.integers(0, 2 * padding + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def total_loss(model: Model, task_id: str, images, labels, lam: float, train: bool = True,
               update_stats: bool = True):
    """Cross-entropy plus orthogonality penalty; returns (loss, logits, orth)."""
    logits = forward(model, task_id, images, train=train, update_stats=update_stats)
    ce = ad.softmax_cross_entropy(logits, labels)
    orth = task_orthogonality(model, task_id, lam) if lam else ad.constant(0.0)
    return ce + orth, logits, orth


def evaluate(model: Model, task_id: str, dataset: Dataset, batch_size: int = 64):
    """Eval-mode ``(loss, accuracy)`` of ``task_id`` on ``dataset``."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    logits = predict(model, task_id, dataset.as_float(), batch_size)
    ce = ad.softmax_cross_entropy(ad.constant(logits), dataset.labels).item()
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return ce, acc


def _run(model: Model, task_id: str, mode: str, dataset: Dataset, config: TrainConfig,
         lam: float, eval_set: Optional[Dataset], log: Optional[Callable[[str], None]]) -> TrainResult:
    config.validate()
    if dataset.num_classes != model.task(task_id).num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, task {task_id!r} "
            f"has {model.task(task_id).num_classes}"
        )
    selected = trainable_params(model, task_id, mode)
    set_trainable(model, selected)
    opt = ad.SGD([p for _, p in selected], config.lr, config.momentum, config.weight_decay)
    rng = make_rng(config.seed)
    images = dataset.as_float()
    labels = dataset.labels
    result = TrainResult(task_id, mode)
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(len(labels))
        loss_sum = orth_sum = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = images[idx]
            if config.augment:
                batch = augment_batch(batch, rng, config.crop_padding)
            opt.zero_grad()
            loss, logits, orth = total_loss(model, task_id, batch, labels[idx], lam)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start} "
                    f"(task {task_id!r}, lr {opt.lr})"
                )
            loss.backward()
            opt.step()
            loss_sum += value * len(idx)
            orth_sum += orth.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        n = max(len(labels), 1)
        records = [EpochRecord(epoch, "train", loss_sum / n, correct / n, orth_sum / n)]
        if eval_set is not None:
            e_loss, e_acc = evaluate(model, task_id, eval_set)
            records.append(EpochRecord(epoch, "eval", e_loss, e_acc, float("nan")))
        for rec in records:
            result.history.append(rec)
            line = rec.to_line()
            logger.debug(line)
            if log is not None:
                log(line)
    set_trainable(model, [])
    return result


def train_source(model: Model, dataset: Dataset, config: TrainConfig,
                 eval_set: Optional[Dataset] = None, freeze: bool = True,
                 log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train cores, source factors and all plain source parameters.

    Cores are frozen afterwards unless ``freeze`` is false.
    """
    if model.cores_frozen:
        raise FrozenParameterError("cores are frozen; source training would modify them")
    lam = config.lambda_orth if config.orth_in_source else 0.0
    result = _run(model, model.source_task, "source", dataset, config, lam, eval_set, log)
    if freeze:
        model.freeze_cores()
    return result


def adapt_task(model: Model, task_id: str, dataset: Dataset, config: TrainConfig,
               eval_set: Optional[Dataset] = None, mode: str = "adapt",
               log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Fit a registered task on frozen cores.

    ``mode="adapt"`` trains factors, batch-norm, projections and head;
    ``mode="head"`` trains the head only (frozen-feature baseline).
    """
    if mode not in ("adapt", "head"):
        raise ConfigError(f"adaptation mode must be 'adapt' or 'head', got {mode!r}")
    if task_id == model.source_task:
        raise ConfigError("adapting the source task would change it; register a new task")
    model.task(task_id)
    model.freeze_cores()
    before = [c.values.tobytes() for c in model.cores]
    lam = config.lambda_orth if (config.orth_in_adapt and mode == "adapt") else 0.0
    result = _run(model, task_id, mode, dataset, config, lam, eval_set, log)
    if [c.values.tobytes() for c in model.cores] != before:
        raise FrozenParameterError("a frozen core changed during adaptation")
    return result


@dataclass
class SweepRow:
    value: float
    n_train: int
    accuracy: float
    loss: float

    def to_line(self, key: str) -> str:
        return f"{key}={self.value:g} n_train={self.n_train} accuracy={self.accuracy:.4f} loss={self.loss:.6f}"


def data_fraction_sweep(model: Model, task_id: str, train: Dataset, test: Dataset,
                        fractions: Sequence[float], config: TrainConfig,
                        mode: str = "adapt", seed: int = 0) -> List[SweepRow]:
    """Adapt a fresh copy of the source task on stratified subsets of ``train``.

    Every run starts from identical task state (created with ``seed``) and
    uses ``config`` unchanged; the temporary tasks are removed afterwards.
    """
    rows = []
    for frac in fractions:
        subset = train.stratified_fraction(frac, seed=config.seed)
        tid = f"{task_id}@{frac:g}"
        model.add_task(tid, train.num_classes, seed=seed)
        try:
            adapt_task(model, tid, subset, config, mode=mode)
            loss, acc = evaluate(model, tid, test)
        finally:
            model.remove_task(tid)
        rows.append(SweepRow(float(frac), len(subset), acc, loss))
    return rows


def lambda_sweep(model: Model, task_id: str, train: Dataset, test: Dataset,
                 lambdas: Sequence[float], config: TrainConfig, seed: int = 0) -> List[SweepRow]:
    """Adaptation accuracy for each orthogonality weight in ``lambdas``."""
    rows = []
    for lam in lambdas:
        cfg = TrainConfig(**{**config.__dict__, "lambda_orth": float(lam)})
        tid = f"{task_id}@lambda={lam:g}"
        model.add_task(tid, train.num_classes, seed=seed)
        try:
            adapt_task(model, tid, train, cfg)
            loss, acc = evaluate(model, tid, test)
        finally:
            model.remove_task(tid)
        rows.append(SweepRow(float(lam), len(train), acc, loss))
    return rows
