"""Class-distribution-aware thresholding (CAT) of unlabeled alignment scores."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# guards ceil/floor against representation error such as 0.3 * 10 = 3.0000000000000004
_ROUND_GUARD = 1e-9


@dataclass(frozen=True)
class ClassPriors:
    pi: np.ndarray

    def __post_init__(self):
        if np.any(self.pi < 0) or np.any(self.pi > 1):
            raise ValueError("class priors must lie in [0, 1]")


@dataclass(frozen=True)
class CatThresholds:
    tau_plus: np.ndarray
    tau_minus: np.ndarray
    rho: float = 0.9


def estimate_priors(y_labeled: np.ndarray) -> ClassPriors:
    y = np.asarray(y_labeled, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] == 0:
        raise ValueError("estimate_priors needs a non-empty labeled set")
    return ClassPriors(y.sum(axis=0) / y.shape[0])


def positive_quota(pi: float, n: int) -> int:
    return min(n, max(0, math.ceil(pi * n - _ROUND_GUARD)))


def negative_quota(rho: float, n: int, a: int) -> int:
    return max(0, math.floor(rho * (n - a) + _ROUND_GUARD))


def compute_thresholds(q: np.ndarray, priors: ClassPriors, rho: float = 0.9) -> CatThresholds:
    """Per class: the positive threshold admits the top ``ceil(pi_k n)`` scores and the
    negative threshold admits the bottom ``floor(rho (n - that))`` scores."""
    q = np.asarray(q, dtype=np.float64)
    n, C = q.shape
    if n < 1:
        raise ValueError("compute_thresholds needs at least one score row")
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    ordered = np.sort(q, axis=0)  # ascending
    tau_plus = np.empty(C)
    tau_minus = np.empty(C)
    for k in range(C):
        a = positive_quota(float(priors.pi[k]), n)
        r = negative_quota(rho, n, a)
        tau_plus[k] = ordered[n - a, k] if a > 0 else np.inf
        tau_minus[k] = ordered[r - 1, k] if r > 0 else -np.inf
    return CatThresholds(tau_plus, tau_minus, rho)


def assign_pseudo_labels(q: np.ndarray, th: CatThresholds) -> np.ndarray:
    """+1 where ``q >= tau_plus``, 0 where ``q <= tau_minus``, -1 elsewhere."""
    q = np.asarray(q, dtype=np.float64)
    out = np.full(q.shape, -1, dtype=np.int8)
    out[q <= th.tau_minus] = 0
    out[q >= th.tau_plus] = 1
    return out


def pseudo_label_cf1(y_hat: np.ndarray, y_true: np.ndarray) -> float:
    """Macro F1 over classes, counting only cells with a pseudo-label (not -1)."""
    y_hat = np.asarray(y_hat)
    y_true = np.asarray(y_true)
    if y_hat.shape != y_true.shape:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {y_true.shape}")
    mask = y_hat != -1
    pred = (y_hat == 1) & mask
    true = (y_true == 1) & mask
    tp = (pred & true).sum(axis=0)
    fp = (pred & ~true).sum(axis=0)
    fn = (~pred & true).sum(axis=0)
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1.mean()) if f1.size else 0.0


def pseudo_coverage(y_hat: np.ndarray) -> float:
    y_hat = np.asarray(y_hat)
    return float((y_hat != -1).mean()) if y_hat.size else 0.0
