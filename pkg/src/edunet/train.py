"""Training loop, evaluation and k-fold cross-validation."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .checkpoint import Checkpoint
from .data import AugmentConfig, DataError, FoldSpec, Sample, augment
from .losses import combined_loss
from .metrics import MetricsReport
from .model import EDUNetConfig, edunet_forward, init_params, predict_mask
from .optim import AdamState, PlateauState, adam_step, plateau_step
from .tensor import Tensor, no_grad

RNG_STREAMS = ("init", "shuffle", "augment", "droppath")
LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "lr"]


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sched_factor: float = 0.5
    sched_patience: int = 5
    sched_min_lr: float = 1e-6
    sched_threshold: float = 1e-4
    seed: int = 0
    dice_smooth: float = 1.0
    include_background_in_loss: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def check_branches(self, model_cfg: EDUNetConfig) -> None:
        if model_cfg.use_global and model_cfg.use_local and self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be 0 with both branches enabled")
        if (model_cfg.use_global and not model_cfg.use_local and self.alpha == 0) or (
            model_cfg.use_local and not model_cfg.use_global and self.beta == 0
        ):
            raise ValueError("the only enabled branch has zero loss weight")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def log_to_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
    return buf.getvalue()


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: List[LogRow] = field(default_factory=list)

    @property
    def log_csv(self) -> str:
        return log_to_csv(self.log)


def stack_batch(samples: Sequence[Sample]):
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"samples in a batch must share one extent, got {sorted(shapes)}")
    images = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


def _batches(n: int, size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield order[start : start + size]


def _loss_value(outputs, masks, tc: TrainConfig):
    return combined_loss(
        outputs, masks, tc.alpha, tc.beta, tc.dice_smooth, tc.include_background_in_loss
    )


def dataset_loss(params, model_cfg: EDUNetConfig, tc: TrainConfig, samples: Sequence[Sample]) -> float:
    """Sample-weighted mean combined loss in eval mode."""
    total = 0.0
    with no_grad():
        for idx in _batches(len(samples), tc.batch_size):
            images, masks = stack_batch([samples[i] for i in idx])
            out = edunet_forward(images, params, model_cfg, training=False)
            total += float(_loss_value(out, masks, tc).data) * len(idx)
    return total / len(samples)


def _snapshot(params, model_cfg, tc, epoch, adam, plateau, rngs) -> Checkpoint:
    ck = Checkpoint(model_cfg, params, tc.to_dict(), epoch, adam, plateau, {k: g.bit_generator.state for k, g in rngs.items()})
    return ck.clone()


def train(
    samples: Sequence[Sample],
    model_cfg: EDUNetConfig,
    train_cfg: TrainConfig,
    val_samples: Optional[Sequence[Sample]] = None,
    augment_cfg: Optional[AugmentConfig] = None,
    on_epoch: Optional[Callable[[LogRow], None]] = None,
) -> TrainResult:
    """Fit a model; the returned ``best`` checkpoint minimises validation loss.

    Validation falls back to the (unaugmented) training samples when no
    ``val_samples`` are given.
    """
    if not samples:
        raise DataError("training set is empty")
    train_cfg.check_branches(model_cfg)
    for s in samples:
        s.validate(model_cfg.num_classes)
    val = list(val_samples) if val_samples else list(samples)
    aug = augment_cfg if augment_cfg is not None else AugmentConfig()
    tc = train_cfg
    rngs = {name: stream_rng(tc.seed, name) for name in RNG_STREAMS}
    params = init_params(model_cfg, rngs["init"])
    adam = AdamState()
    plateau = PlateauState(tc.lr, tc.sched_factor, tc.sched_patience, tc.sched_min_lr, tc.sched_threshold)

    best = _snapshot(params, model_cfg, tc, 0, adam, plateau, rngs)
    best_loss = math.inf
    log: List[LogRow] = []
    for epoch in range(1, tc.max_epochs + 1):
        lr = plateau.lr
        order = rngs["shuffle"].permutation(len(samples))
        total = 0.0
        for idx in _batches(len(samples), tc.batch_size, order):
            batch = [augment(samples[i], aug, rngs["augment"]) for i in idx]
            images, masks = stack_batch(batch)
            out = edunet_forward(images, params, model_cfg, training=True, rng=rngs["droppath"])
            loss = _loss_value(out, masks, tc)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss {value} at epoch {epoch} (lr={lr:g})")
            params.zero_grad()
            loss.backward()
            adam_step(params, adam, lr, (tc.adam_beta1, tc.adam_beta2), tc.adam_eps)
            total += value * len(idx)
        params.zero_grad()
        train_loss = total / len(samples)
        val_loss = dataset_loss(params, model_cfg, tc, val)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss {val_loss} at epoch {epoch}")
        row = LogRow(epoch, train_loss, val_loss, lr)
        log.append(row)
        if on_epoch is not None:
            on_epoch(row)
        plateau_step(plateau, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best = _snapshot(params, model_cfg, tc, epoch, adam, plateau, rngs)
    last = _snapshot(params, model_cfg, tc, tc.max_epochs, adam, plateau, rngs)
    return TrainResult(best, last, log)


def predict(ckpt: Checkpoint, images: np.ndarray) -> Dict[str, np.ndarray]:
    """Eval-mode probabilities: ``fused`` plus one entry per enabled branch."""
    with no_grad():
        out = edunet_forward(np.asarray(images, dtype=np.float32), ckpt.params, ckpt.model_cfg, training=False)
    res = {"fused": out["fused_prob"].data}
    for key, name in (("logits_global", "global"), ("logits_local", "local")):
        if key in out:
            res[name] = ops.softmax(out[key], axis=1).data
    return res


def evaluate(
    ckpt: Checkpoint,
    samples: Sequence[Sample],
    pooled: bool = False,
    fold: int = 0,
    dataset: str = "data",
    output: str = "fused",
    batch_size: int = 4,
) -> MetricsReport:
    """Per-class DSC / sensitivity of ``output`` (fused, global or local) predictions."""
    report = MetricsReport(dataset, ckpt.model_cfg.num_classes, pooled=pooled)
    for idx in _batches(len(samples), batch_size):
        batch = [samples[i].validate(ckpt.model_cfg.num_classes) for i in idx]
        images, masks = stack_batch(batch)
        probs = predict(ckpt, images)
        if output not in probs:
            raise ValueError(f"output {output!r} not available; have {sorted(probs)}")
        preds = np.argmax(probs[output], axis=1)
        for s, p in zip(batch, preds):
            report.add_image(s.id, fold, p, s.mask)
    return report


def cross_validate(
    samples: Sequence[Sample],
    folds: FoldSpec,
    model_cfg: EDUNetConfig,
    train_cfg: TrainConfig,
    augment_cfg: Optional[AugmentConfig] = None,
    dataset: str = "data",
    pooled: bool = False,
) -> tuple:
    """Train one model per fold and evaluate it on that fold's held-out samples.

    The held-out fold also supplies the validation loss for scheduling and
    best-checkpoint selection. With ``k == 1`` the model is trained and
    evaluated on every sample and the report is flagged accordingly.
    Returns ``(report, {fold: TrainResult})``.
    """
    by_id = {s.id: s for s in samples}
    if set(by_id) != set(folds.assignment):
        raise DataError("fold assignment does not cover exactly the given samples")
    report = MetricsReport(dataset, model_cfg.num_classes, pooled=pooled)
    if folds.k == 1:
        report.flags.append("k=1: trained and evaluated on all samples (no held-out data)")
    results = {}
    for f in range(folds.k):
        train_set = [by_id[i] for i in folds.train_ids(f)]
        test_set = [by_id[i] for i in folds.fold_ids(f)]
        if not train_set or not test_set:
            raise DataError(f"fold {f} is empty")
        res = train(train_set, model_cfg, train_cfg, test_set if folds.k > 1 else None, augment_cfg)
        results[f] = res
        report = report.merge(evaluate(res.best, test_set, pooled, f, dataset))
    return report, results
