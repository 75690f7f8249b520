"""Multi-label training with optional knowledge distillation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .metrics import mean_average_precision
from .models.attention import CapacityExceeded

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"non-finite loss: {record}")
        self.record = record


def bce_multilabel(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over classes (and batch), in logit space."""
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ")
    if torch.any((labels < 0) | (labels > 1)):
        raise ValueError("labels must lie in [0, 1]")
    return F.binary_cross_entropy_with_logits(logits, labels)


def kl_distill(teacher_probs: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Mean per-class Bernoulli KL(p || sigmoid(z))."""
    p = teacher_probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    # log sigmoid(z) = -softplus(-z), log(1 - sigmoid(z)) = -softplus(z)
    kl = p * (torch.log(p) + F.softplus(-logits)) + (1 - p) * (torch.log1p(-p) + F.softplus(logits))
    return kl.mean()


def bce_distill(teacher_probs: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """BCE against the teacher's probabilities (KL plus the teacher entropy)."""
    return F.binary_cross_entropy_with_logits(logits, teacher_probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP))


DISTILL_LOSSES = {"kl": kl_distill, "bce": bce_distill}


def total_loss(labels, logits, teacher_probs=None, kind: str = "kl") -> torch.Tensor:
    """``0.5 * (bce + distill)``; plain BCE without a teacher."""
    bce = bce_multilabel(logits, labels)
    if teacher_probs is None:
        return bce
    return 0.5 * (bce + DISTILL_LOSSES[kind](teacher_probs, logits))


def ensemble_teacher(prob_vectors) -> np.ndarray:
    """Per-class arithmetic mean of teacher probabilities."""
    probs = [np.asarray(p, dtype=np.float64) for p in prob_vectors]
    if not probs:
        raise ValueError("need at least one teacher")
    return np.mean(np.stack(probs), axis=0)


@dataclass(frozen=True)
class LrSchedule:
    """Halve the rate every ``every`` epochs from ``start`` on (epochs are 1-based)."""

    epochs: int
    start: int | None
    every: int = 1

    def factor(self, epoch: int) -> float:
        if self.start is None or epoch < self.start:
            return 1.0
        return 0.5 ** ((epoch - self.start) // self.every + 1)


SCHEDULES = {
    "balanced": LrSchedule(epochs=25, start=11, every=5),
    "full": LrSchedule(epochs=10, start=2, every=1),
    "constant": LrSchedule(epochs=10, start=None),
}


@dataclass(frozen=True)
class DistillConfig:
    lr: float = 1e-4
    batch_size: int = 12
    schedule: str = "full"
    epochs: int | None = None
    distill_loss: str = "kl"
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.distill_loss not in DISTILL_LOSSES:
            raise ValueError(f"unknown distill loss {self.distill_loss!r}")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")

    @property
    def num_epochs(self) -> int:
        return self.epochs if self.epochs is not None else SCHEDULES[self.schedule].epochs

    def lr_at(self, epoch: int) -> float:
        return self.lr * SCHEDULES[self.schedule].factor(epoch)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TeacherHandle:
    """Frozen teachers combined by averaging probabilities."""

    models: list
    combine: str = "mean"

    def __post_init__(self):
        if not self.models:
            raise ValueError("need at least one teacher")
        if self.combine != "mean":
            raise ValueError("only the 'mean' combination rule is supported")

    def predict_proba(self, features, batch_size: int = 64) -> np.ndarray:
        return ensemble_teacher([predict_proba(m, features, batch_size) for m in self.models])


def _as_module(model):
    return getattr(model, "model_", model)


@torch.no_grad()
def predict_logits(model, features, batch_size: int = 64) -> np.ndarray:
    """Logits for a stacked array or a list of variable-length spectrograms."""
    module = _as_module(model)
    was_training = module.training
    module.eval()
    dtype = next(module.parameters()).dtype
    try:
        if isinstance(features, np.ndarray) and features.ndim == 3:
            out = []
            for i in range(0, len(features), batch_size):
                chunk = torch.as_tensor(features[i:i + batch_size], dtype=dtype)
                try:
                    out.append(module(chunk).numpy())
                except CapacityExceeded:
                    if len(chunk) == 1:
                        raise
                    # the budget is per forward pass; retry clip by clip
                    out.extend(module(c[None]).numpy() for c in chunk)
            return np.concatenate(out).astype(np.float64)
        return np.stack([module(torch.as_tensor(np.asarray(f)[None], dtype=dtype))[0].numpy()
                         for f in features]).astype(np.float64)
    finally:
        module.train(was_training)


def predict_proba(model, features, batch_size: int = 64) -> np.ndarray:
    if hasattr(model, "predict_proba") and not isinstance(model, torch.nn.Module):
        return np.asarray(model.predict_proba(features), dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-predict_logits(model, features, batch_size)))


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list = field(default_factory=list)
    optimizer: torch.optim.Optimizer | None = None


def train(model, features, labels, config: DistillConfig, teacher=None, eval_set=None,
          log_path=None) -> TrainResult:
    """Adam training on ``(clips, frames, mels)`` features and multi-hot labels.

    ``teacher`` is a :class:`TeacherHandle` (or anything with
    ``predict_proba``); its outputs are computed once up front since teachers
    are frozen. ``eval_set`` is an optional ``(features, labels)`` pair scored
    with mAP after every epoch.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.float32)
    if len(features) == 0:
        raise ValueError("training set is empty")
    if len(features) != len(labels):
        raise ValueError("features and labels differ in length")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dtype = next(model.parameters()).dtype
    soft = None
    if teacher is not None:
        soft = torch.as_tensor(teacher.predict_proba(features), dtype=dtype)
    x_all = torch.as_tensor(features, dtype=dtype)
    y_all = torch.as_tensor(labels, dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, config.num_epochs + 1):
            lr = config.lr_at(epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = rng.permutation(len(features))
            total, count = 0.0, 0
            for step, i in enumerate(range(0, len(order), config.batch_size)):
                idx = torch.as_tensor(order[i:i + config.batch_size])
                logits = model(x_all[idx])
                loss = total_loss(y_all[idx], logits, None if soft is None else soft[idx],
                                  config.distill_loss)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged({"epoch": epoch, "step": step, "lr": lr,
                                            "loss": loss.item()})
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            record = {"epoch": epoch, "lr": lr, "train_loss": total / count, "eval_mAP": None}
            if eval_set is not None:
                scores = predict_logits(model, eval_set[0])
                record["eval_mAP"] = mean_average_precision(scores, eval_set[1])[0]
            history.append(record)
            log.info("epoch %d lr %.3g loss %.4f mAP %s", epoch, lr, record["train_loss"],
                     record["eval_mAP"])
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(model=model, history=history, optimizer=opt)
