"""Asymmetric loss, the alignment losses, the context auxiliary loss and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

PROB_EPS = 1e-7
# cross-entropy clamp; the log primitive itself never clamps
CE_EPS = 1e-12


@dataclass(frozen=True)
class ASLParams:
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    eps: float = PROB_EPS

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError(f"focusing parameters must be >= 0: {self}")


@dataclass
class LossReport:
    sup: float
    unsup: float
    aux: float
    total: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)


def asl(p: float, y: int, params: ASLParams = ASLParams()) -> float:
    """Scalar reference form of the asymmetric loss."""
    p = min(max(p, params.eps), 1.0 - params.eps)
    if y == 1:
        return -((1.0 - p) ** params.gamma_pos) * math.log(p)
    return -(p**params.gamma_neg) * math.log(1.0 - p)


def asl_terms(p: Tensor, y: np.ndarray, params: ASLParams = ASLParams()) -> Tensor:
    """Elementwise ASL for probabilities ``p`` and 0/1 targets ``y``."""
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"asl: predictions {p.shape} vs targets {y.shape}")
    pc = T.clamp(p, params.eps, 1.0 - params.eps)
    one_minus = 1.0 - pc
    pos = T.neg(T.power(one_minus, params.gamma_pos) * T.log(pc))
    neg = T.neg(T.power(pc, params.gamma_neg) * T.log(one_minus))
    return pos * y + neg * (1.0 - y)


def sup_alignment_loss(p: Tensor, y: np.ndarray, params: ASLParams = ASLParams()) -> Tensor:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("supervised targets must be 0/1")
    return T.tmean(asl_terms(p, y, params))


def unsup_alignment_loss(p: Tensor, y_hat: np.ndarray, params: ASLParams = ASLParams()) -> Tensor:
    """Mean ASL over cells whose pseudo-label is 0 or 1; -1 cells are masked out."""
    y_hat = np.asarray(y_hat)
    if p.shape != y_hat.shape:
        raise DimensionError(f"unsup loss: predictions {p.shape} vs pseudo-labels {y_hat.shape}")
    mask = y_hat != -1
    count = int(mask.sum())
    if count == 0:
        return T.tensor(0.0)
    terms = asl_terms(p, (y_hat == 1).astype(np.float64), params)
    return T.tsum(terms * mask.astype(np.float64)) * (1.0 / count)


def _ce(probs: Tensor, targets: np.ndarray) -> Tensor:
    picked = probs[np.arange(len(targets)), targets]
    return T.neg(T.tmean(T.log(T.clamp(picked, CE_EPS, 1.0))))


def aux_loss(
    p_a_labeled: Optional[Tensor],
    context_labels: Optional[np.ndarray],
    p_a_unlabeled: Optional[Tensor] = None,
    q_a_unlabeled: Optional[np.ndarray] = None,
    tau: float = 0.9,
) -> Tensor:
    """Cross-entropy on labeled context ids plus confidence-filtered pseudo context ids.

    Labeled rows with a negative context id (no positive labels) are skipped.
    Unlabeled rows count only when ``max(q_a) > tau``; their target is
    ``argmax(q_a)``. Each part is averaged over its kept rows; empty parts are 0.
    """
    total = T.tensor(0.0)
    if p_a_labeled is not None and context_labels is not None:
        c = np.asarray(context_labels, dtype=np.int64)
        K = p_a_labeled.shape[-1]
        if np.any(c >= K):
            raise ValueError(f"context label out of range [0, {K}): {c.max()}")
        keep = np.flatnonzero(c >= 0)
        if keep.size:
            total = total + _ce(T.take_rows(p_a_labeled, keep), c[keep])
    if p_a_unlabeled is not None and q_a_unlabeled is not None:
        q = np.asarray(q_a_unlabeled)
        keep = np.flatnonzero(q.max(axis=1) > tau)
        if keep.size:
            total = total + _ce(T.take_rows(p_a_unlabeled, keep), q[keep].argmax(axis=1))
    return total


def total_loss(sup, unsup, aux, aux_weight: float = 1.0) -> LossReport:
    parts = [x if isinstance(x, Tensor) else T.tensor(x) for x in (sup, unsup, aux)]
    weighted_aux = parts[2] * aux_weight if aux_weight != 1.0 else parts[2]
    tot = parts[0] + parts[1] + weighted_aux
    vals = [float(x.data) for x in parts]
    return LossReport(vals[0], vals[1], vals[2], float(tot.data), tot)
