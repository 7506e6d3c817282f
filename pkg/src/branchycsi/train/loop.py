"""Training loop and evaluation for the two-exit network."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..csi.preprocess import RadioImage
from ..errors import ParameterError
from ..labels import HAR_CLASSES, ROD_CLASSES
from ..nn.branchy import BranchyGhostNet, to_model_input
from ..tensor import NonFiniteError, no_grad
from .augment import AugmentConfig, augment_values
from .loss import LossReport, har_mask, joint_loss
from .metrics import MetricsReport
from .optim import AdamW, cosine_lr

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, lr: float, report: Optional[LossReport] = None):
        self.epoch, self.batch, self.lr, self.report = epoch, batch, lr, report
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:.3g}: {report}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 50
    test_batch: int = 1
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss_weights: tuple = (1.0, 1.0)
    augment: bool = True
    crop: bool = True
    flip: bool = True
    jitter: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.test_batch < 1:
            raise ParameterError("epochs, batch_size and test_batch must be >= 1")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ParameterError("learning rates must be nonnegative")

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(crop=self.crop, flip=self.flip, jitter=self.jitter)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"], d["loss_weights"] = list(self.betas), list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown training config keys: {sorted(unknown)}")
        raw = dict(raw)
        for key in ("betas", "loss_weights"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: LossReport
    rod_accuracy: float
    har_accuracy: Optional[float]
    seconds: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "lr": self.lr, **self.loss.to_dict(), "rod_accuracy": self.rod_accuracy,
                "har_accuracy": self.har_accuracy, "seconds": round(self.seconds, 3)}


@dataclass
class TrainResult:
    model: BranchyGhostNet
    history: list = field(default_factory=list)


def _batches(order: np.ndarray, size: int) -> list:
    """Fixed-size batches; a trailing single sample joins the previous batch (batch norm needs >= 2)."""
    out = [order[i:i + size] for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def _labels(samples: Sequence[RadioImage]):
    rod = [s.rod_label for s in samples]
    har = [-1 if s.har_label is None else s.har_label for s in samples]
    return rod, har


def train(model: BranchyGhostNet, dataset: Sequence[RadioImage], cfg: TrainConfig,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Minimize the joint loss; deterministic for a given ``cfg.seed`` on one thread."""
    if len(dataset) == 0:
        raise ParameterError("training dataset is empty")
    for s in dataset:
        if s.rod_label is None:
            raise ParameterError("every training sample needs an occupancy label")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), cfg.base_lr, cfg.betas, cfg.weight_decay, cfg.eps)
    aug = cfg.augment_config
    result = TrainResult(model)
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr, cfg.min_lr)
        opt.lr = lr
        order = rng.permutation(len(dataset))
        sums = np.zeros(3)
        har_batches = 0
        rod_hits = har_hits = har_seen = 0
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            samples = [dataset[i] for i in idx]
            if cfg.augment:
                imgs = [augment_values(s.values, np.random.SeedSequence([cfg.seed, epoch, int(i)]), aug)
                        for s, i in zip(samples, idx)]
            else:
                imgs = [s.values for s in samples]
            rod_y, har_y = _labels(samples)
            try:
                rod_logits, har_logits = model.forward_full(to_model_input(np.stack(imgs)))
                total, report = joint_loss(rod_logits, har_logits, rod_y, har_y, cfg.loss_weights)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, lr) from exc
            if not np.isfinite(report.total):
                raise TrainingDiverged(epoch, b, lr, report)
            opt.zero_grad()
            total.backward()
            opt.step()
            n = len(idx)
            sums += np.array([report.rod_ce, report.har_ce, report.total]) * n
            mask = har_mask(har_y)
            har_batches += int(mask.sum())
            rod_hits += int((np.argmax(rod_logits.data, 1) == np.asarray(rod_y)).sum())
            if mask.any():
                har_hits += int((np.argmax(har_logits.data[mask], 1) == np.asarray(har_y)[mask]).sum())
                har_seen += int(mask.sum())
        n = len(dataset)
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss=LossReport(sums[0] / n, sums[1] / n, sums[2] / n),
            rod_accuracy=rod_hits / n,
            har_accuracy=har_hits / har_seen if har_seen else None,
            seconds=time.perf_counter() - t0,
        )
        result.history.append(record)
        logger.info("epoch %d lr %.2e loss %.4f rod %.3f", epoch, lr, record.loss.total, record.rod_accuracy)
        if on_epoch is not None:
            on_epoch(record)
    model.eval()
    return result


def predict(model: BranchyGhostNet, dataset: Sequence[RadioImage], batch_size: int = 1):
    """Argmax labels of both heads (eval mode, both heads evaluated)."""
    model.eval()
    rod, har = [], []
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            x = to_model_input(np.stack([s.values for s in dataset[i:i + batch_size]]))
            r, h = model.forward_full(x)
            rod.extend(np.argmax(r.data, 1).tolist())
            har.extend(np.argmax(h.data, 1).tolist())
    return rod, har


def evaluate(model: BranchyGhostNet, dataset: Sequence[RadioImage], mode: str = "rod",
             batch_size: int = 1) -> MetricsReport:
    """Occupancy metrics over all samples, or activity metrics over samples with an activity label."""
    if mode not in ("rod", "har"):
        raise ParameterError(f"mode must be rod or har, got {mode!r}")
    if mode == "rod":
        samples = [s for s in dataset if s.rod_label is not None]
    else:
        samples = [s for s in dataset if s.har_label is not None]
    if not samples:
        raise ParameterError(f"no samples labelled for {mode} evaluation")
    rod, har = predict(model, samples, batch_size)
    if mode == "rod":
        return MetricsReport.from_predictions([s.rod_label for s in samples], rod, len(ROD_CLASSES),
                                              "rod", ROD_CLASSES)
    return MetricsReport.from_predictions([s.har_label for s in samples], har, len(HAR_CLASSES),
                                          "har", HAR_CLASSES)
