"""Ranking and thresholded multi-label metrics."""

from __future__ import annotations

import numpy as np


def average_precision(scores: np.ndarray, y: np.ndarray) -> float:
    """AP of one class; descending score order, ties broken by lower index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    hits = np.asarray(y)[order] == 1
    if not hits.any():
        return float("nan")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def per_class_ap(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    scores, y = np.asarray(scores), np.asarray(y)
    if scores.shape != y.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {y.shape}")
    return np.array([average_precision(scores[:, k], y[:, k]) for k in range(y.shape[1])])


def mean_average_precision(scores: np.ndarray, y: np.ndarray) -> float:
    """Mean AP over classes that have at least one positive (others are skipped)."""
    aps = per_class_ap(scores, y)
    valid = ~np.isnan(aps)
    return float(aps[valid].mean()) if valid.any() else float("nan")


def skipped_classes(y: np.ndarray) -> list[int]:
    return [int(k) for k in np.flatnonzero(np.asarray(y).sum(axis=0) == 0)]


def cf1(scores: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    """Per-class F1 of ``scores >= threshold`` against ``y``, macro-averaged."""
    scores, y = np.asarray(scores), np.asarray(y)
    if scores.shape != y.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {y.shape}")
    pred = scores >= threshold
    true = y == 1
    tp = (pred & true).sum(axis=0)
    denom = 2 * tp + (pred & ~true).sum(axis=0) + (~pred & true).sum(axis=0)
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1.mean())
