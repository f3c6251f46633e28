"""Training protocol: labeled warm-up, per-epoch CAT refresh, joint optimization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .context import ContextPartition, assign_context_labels
from .data import SSLData, SyntheticSpec, augment
from .losses import ASLParams, aux_loss, sup_alignment_loss, total_loss, unsup_alignment_loss
from .metrics import cf1, mean_average_precision
from .model import CBSAModel
from .optim import AdamW, OneCycle, one_cycle_lr
from .pseudo import assign_pseudo_labels, compute_thresholds, estimate_priors, pseudo_coverage, pseudo_label_cf1

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "loss_sup", "loss_unsup", "loss_aux", "map_val", "cf1_val", "pseudo_cf1", "pseudo_coverage")


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, record: "EpochRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    warmup_epochs: int = 8
    total_epochs: int = 40
    batch_size: int = 8
    max_lr: float = 1e-3
    pct_warm: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    rho: float = 0.9
    context_tau: float = 0.9
    aux_weight: float = 1.0
    seed: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs}, {self.total_epochs}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def schedule(self) -> OneCycle:
        return OneCycle(self.max_lr, self.pct_warm, self.div_start, self.div_final)

    @property
    def asl(self) -> ASLParams:
        return ASLParams(self.gamma_pos, self.gamma_neg)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_sup: float
    loss_unsup: float
    loss_aux: float
    map_val: float
    cf1_val: float
    pseudo_cf1: float = float("nan")
    pseudo_coverage: float = float("nan")
    tau_plus: Optional[list[float]] = None
    tau_minus: Optional[list[float]] = None

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]


@dataclass
class TrainResult:
    records: list[EpochRecord]
    context_accuracy: Optional[float] = None
    final_scores: Optional[np.ndarray] = field(default=None, repr=False)


def _nonfinite(epoch: int, step: int, lr: float, what: str) -> NonFiniteLossError:
    nan = float("nan")
    rec = EpochRecord(epoch, lr, nan, nan, nan, nan, nan)
    return NonFiniteLossError(f"non-finite {what} at epoch {epoch}, step {step}", rec)


def labeled_per_batch(batch: int, m: int, n: int) -> int:
    return min(batch - 1, max(1, math.ceil(batch * m / (m + n))))


def steps_per_epoch(cfg: TrainConfig, m: int, n: int) -> tuple[int, int]:
    """(warm-up steps, post-warm-up steps) per epoch."""
    warm = math.ceil(m / cfg.batch_size)
    unl = cfg.batch_size - labeled_per_batch(cfg.batch_size, m, n)
    return warm, math.ceil(n / unl) if n else 0


def evaluate(model: CBSAModel, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    scores = model.predict(features)
    return mean_average_precision(scores, labels), cf1(scores, labels)


def context_accuracy(model: CBSAModel, features: np.ndarray, labels: np.ndarray, partition: ContextPartition) -> Optional[float]:
    probs = model.predict_context(features)
    if probs is None:
        return None
    target = assign_context_labels(labels, partition)
    keep = target >= 0
    return float((probs.argmax(axis=1)[keep] == target[keep]).mean())


def train(
    model: CBSAModel,
    data: SSLData,
    cfg: TrainConfig,
    aug: SyntheticSpec,
    partition: Optional[ContextPartition] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Run the full schedule; ``on_epoch`` sees each record as soon as it is final."""
    if model.ci and partition is None:
        raise ValueError("context identification enabled but no partition given")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    m, n = len(data.features_l), len(data.features_u)
    warm_steps, post_steps = steps_per_epoch(cfg, m, n)
    total_steps = cfg.warmup_epochs * warm_steps + (cfg.total_epochs - cfg.warmup_epochs) * post_steps
    n_lab = labeled_per_batch(cfg.batch_size, m, n)
    n_unl = cfg.batch_size - n_lab
    params = model.parameters()
    opt = AdamW(params, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    asl = cfg.asl
    priors = estimate_priors(data.labels_l)
    ctx_labels = assign_context_labels(data.labels_l, partition) if model.ci else None
    truth_u = data.unlabeled_truth()

    records: list[EpochRecord] = []
    step = 0
    lab_queue: list[int] = []

    def next_labeled(k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if not lab_queue:
                lab_queue.extend(rng.permutation(m).tolist())
            out.append(lab_queue.pop(0))
        return np.array(out)

    for epoch in range(1, cfg.total_epochs + 1):
        warm = epoch <= cfg.warmup_epochs
        sums = np.zeros(3)
        n_steps = 0
        th = None
        rec_pseudo = (float("nan"), float("nan"))
        if not warm:
            q_pool = model.predict(augment(data.features_u, "weak", rng, aug))
            if not np.all(np.isfinite(q_pool)):
                raise _nonfinite(epoch, step, one_cycle_lr(min(step, total_steps - 1), total_steps, cfg.schedule), "unlabeled scores")
            th = compute_thresholds(q_pool, priors, cfg.rho)
            y_hat_pool = assign_pseudo_labels(q_pool, th)
            rec_pseudo = (pseudo_label_cf1(y_hat_pool, truth_u), pseudo_coverage(y_hat_pool))
            batches = [(next_labeled(n_lab), chunk) for chunk in np.array_split(rng.permutation(n), post_steps)]
        else:
            batches = [(chunk, None) for chunk in np.array_split(rng.permutation(m), warm_steps)]

        for lab_idx, unl_idx in batches:
            lr = one_cycle_lr(step, total_steps, cfg.schedule)
            nl = len(lab_idx)
            x_l = augment(data.features_l[lab_idx], "weak", rng, aug)
            if unl_idx is not None:
                x_uw = augment(data.features_u[unl_idx], "weak", rng, aug)
                x_us = augment(data.features_u[unl_idx], "strong", rng, aug)
                g_w, l_w = model.pool_maps(x_uw)
                x_all = np.concatenate([x_l, x_us], axis=0)
            else:
                x_all = x_l
            g, l = model.pool_maps(x_all)
            opt.zero_grad()
            with T.Tape() as tape:
                text = model.text_embeddings()
                p = model.scores(g, l, text)
                # diverged parameters surface here as NaN scores, before the loss domain checks
                if not np.all(np.isfinite(p.data)):
                    raise _nonfinite(epoch, step, lr, "scores")
                sup = sup_alignment_loss(p[:nl], data.labels_l[lab_idx], asl)
                unsup = aux = T.tensor(0.0)
                p_a = model.context_probs(g) if model.ci else None
                if p_a is not None and not np.all(np.isfinite(p_a.data)):
                    raise _nonfinite(epoch, step, lr, "context probabilities")
                if unl_idx is not None:
                    with T.no_grad():
                        frozen_text = tuple(None if t is None else T.detach(t) for t in text)
                        y_hat = assign_pseudo_labels(model.scores(g_w, l_w, frozen_text).data, th)
                        q_a = model.context_probs(g_w).data if model.ci else None
                    unsup = unsup_alignment_loss(p[nl:], y_hat, asl)
                    if model.ci:
                        aux = aux_loss(p_a[:nl], ctx_labels[lab_idx], p_a[nl:], q_a, cfg.context_tau)
                elif model.ci:
                    aux = aux_loss(p_a, ctx_labels[lab_idx])
                report = total_loss(sup, unsup, aux, cfg.aux_weight)
                if not np.isfinite(report.total):
                    rec = EpochRecord(epoch, lr, report.sup, report.unsup, report.aux, float("nan"), float("nan"))
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, step {step}: {report}", rec)
                if report.tensor.requires_grad:
                    tape.backward(report.tensor)
            opt.step(lr)
            sums += (report.sup, report.unsup, report.aux)
            n_steps += 1
            step += 1

        map_val, cf1_val = evaluate(model, data.features_val, data.labels_val)
        means = sums / max(n_steps, 1)
        rec = EpochRecord(
            epoch, lr, float(means[0]), float(means[1]), float(means[2]), map_val, cf1_val, *rec_pseudo,
            tau_plus=None if th is None else th.tau_plus.tolist(),
            tau_minus=None if th is None else th.tau_minus.tolist(),
        )
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d lr %.2e sup %.4f unsup %.4f aux %.4f mAP %.4f pseudoCF1 %.4f", epoch, lr, *means, map_val, rec.pseudo_cf1)

    ctx_acc = None
    if model.ci and data.features_val is not None:
        ctx_acc = context_accuracy(model, data.features_val, data.labels_val, partition)
    return TrainResult(records, ctx_acc)
