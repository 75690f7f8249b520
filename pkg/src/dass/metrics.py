"""Multi-label ranking metrics."""
from __future__ import annotations

import numpy as np


def average_precision(scores, labels) -> float:
    """AP of one class: mean precision at the rank of each positive.

    Ranking is by descending score; ties keep clip index order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    order = np.argsort(-scores, kind="stable")
    rel = labels[order] > 0.5
    n_pos = rel.sum()
    if n_pos == 0:
        raise ValueError("class has no positives")
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, rel.size + 1)
    return float(precision[rel].sum() / n_pos)


def mean_average_precision(scores, labels) -> tuple[float, np.ndarray]:
    """Returns ``(mAP, per_class_ap)``; classes without positives get NaN and are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be (clips, classes)")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    per_class = np.full(scores.shape[1], np.nan)
    for k in range(scores.shape[1]):
        if labels[:, k].any():
            per_class[k] = average_precision(scores[:, k], labels[:, k])
    if np.all(np.isnan(per_class)):
        raise ValueError("no class has a positive label")
    return float(np.nanmean(per_class)), per_class


def relative_drop(map_reference: float, map_eval: float) -> float:
    """``(mAP_ref - mAP_eval) / mAP_ref``."""
    if map_reference <= 0:
        raise ValueError("reference mAP must be positive")
    return (map_reference - map_eval) / map_reference
