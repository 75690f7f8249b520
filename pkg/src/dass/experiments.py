"""Desk-scale experiment recipes shared by the CLI and the acceptance suite.

All experiments run on the synthetic 8-class data with the toy fbank
(199 frames x 16 mels per 10 s clip) and the ``tiny`` model presets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .distill import DistillConfig, TeacherHandle, predict_logits, train
from .features import TOY_FBANK, FbankConfig
from .metrics import mean_average_precision, relative_drop
from .models.attention import AttentionClassifier, attn_preset
from .models.dass import DASS, preset
from .niah import ZERO_PAD, Filler, NiahSpec, build_haystack
from .synth import SynthDataset, synth_dataset

log = logging.getLogger(__name__)

# Adam settings that train each tiny model to a useful level within minutes on one CPU core
TOY_RECIPES = {
    "dass": {"lr": 2e-3, "batch_size": 16, "epochs": 4, "schedule": "constant"},
    "attention": {"lr": 2e-3, "batch_size": 16, "epochs": 8, "schedule": "constant"},
}
EVAL_SEED_OFFSET = 1_000_003


def toy_splits(train_clips: int = 2000, eval_clips: int = 500, classes: int = 8, seed: int = 0,
               clip_seconds: float = 10.0, fbank: str | FbankConfig = "toy"):
    """Train split (normalization measured on it) and an eval split sharing its stats."""
    if isinstance(fbank, str):
        try:
            fbank = {"toy": TOY_FBANK, "default": FbankConfig()}[fbank]
        except KeyError:
            raise ValueError(f"unknown fbank setting {fbank!r}; use 'toy' or 'default'") from None
    tr = synth_dataset(train_clips, classes, seed, fbank, clip_seconds, normalize_from_data=True)
    ev = synth_dataset(eval_clips, classes, seed + EVAL_SEED_OFFSET, tr.fbank_config, clip_seconds)
    return tr, ev


def build_model(kind: str, preset_name: str = "tiny", num_classes: int = 8, pooling=None,
                seed: int = 0) -> torch.nn.Module:
    torch.manual_seed(seed)
    if kind == "dass":
        over = {"num_classes": num_classes}
        if pooling:
            over["pooling"] = pooling
        return DASS(preset(preset_name, **over))
    if kind in ("attention", "attn"):
        return AttentionClassifier(attn_preset(preset_name, num_classes=num_classes,
                                               pooling=pooling or "mean"))
    raise ValueError(f"unknown model kind {kind!r}")


def train_config(seed: int = 0, lr=None, epochs=None, batch_size=None, schedule=None,
                 distill_loss: str = "kl", kind: str = "dass") -> DistillConfig:
    r = TOY_RECIPES["attention" if kind in ("attention", "attn") else "dass"]
    return DistillConfig(lr=lr or r["lr"], batch_size=batch_size or r["batch_size"],
                         schedule=schedule or r["schedule"], epochs=epochs or r["epochs"],
                         distill_loss=distill_loss, seed=seed)


def fit_toy(kind: str, data: SynthDataset, seed: int = 0, pooling=None, teacher=None, epochs=None,
            eval_set=None) -> torch.nn.Module:
    model = build_model(kind, "tiny", data.num_classes, pooling, seed)
    cfg = train_config(seed, epochs=epochs, kind=kind)
    return train(model, data.features, data.labels, cfg, teacher=teacher, eval_set=eval_set).model


def score(model, data: SynthDataset) -> float:
    return mean_average_precision(predict_logits(model, data.features), data.labels)[0]


@dataclass
class KdResult:
    seed: int
    teacher_map: float
    plain_map: float
    distilled_map: float

    @property
    def improved(self) -> bool:
        return self.distilled_map > self.plain_map


def distillation_effect(train_set, eval_set, seeds=(0, 1, 2, 3, 4), teacher_epochs: int = 6,
                        student_epochs: int = 2, teacher_seed: int = 100) -> list[KdResult]:
    """Same student recipe with and without a trained teacher, per seed."""
    teacher = fit_toy("dass", train_set, teacher_seed, epochs=teacher_epochs)
    handle = TeacherHandle([teacher])
    t_map = score(teacher, eval_set)
    out = []
    for s in seeds:
        plain = fit_toy("dass", train_set, s, epochs=student_epochs)
        distilled = fit_toy("dass", train_set, s, teacher=handle, epochs=student_epochs)
        out.append(KdResult(s, t_map, score(plain, eval_set), score(distilled, eval_set)))
        log.info("kd seed %d: plain %.4f distilled %.4f", s, out[-1].plain_map, out[-1].distilled_map)
    return out


def haystack_map(model, data: SynthDataset, length: float, position: float, filler: Filler = ZERO_PAD,
                 seed: int = 0, batch_size: int = 16) -> float:
    """mAP of ``model`` on every clip of ``data`` placed in a haystack."""
    cfg = data.fbank_config
    scores = []
    for i in range(0, len(data), batch_size):
        idx = range(i, min(i + batch_size, len(data)))
        batch = np.stack([build_haystack(data.features[j], NiahSpec(length, position, filler, seed=seed * 100_003 + j,
                                                                     needle_len=data.clip_seconds),
                                         cfg, float(data.powers[j])) for j in idx])
        scores.append(predict_logits(model, batch, batch_size=batch_size))
    return mean_average_precision(np.concatenate(scores), data.labels)[0]


def haystack_drop(model, data: SynthDataset, length: float, position: float, filler: Filler = ZERO_PAD,
                  seed: int = 0, base: float | None = None) -> float:
    base = score(model, data) if base is None else base
    return relative_drop(base, haystack_map(model, data, length, position, filler, seed))
