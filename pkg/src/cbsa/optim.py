"""AdamW and the one-cycle learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class OneCycle:
    max_lr: float = 1e-3
    pct_warm: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4

    @property
    def start_lr(self) -> float:
        return self.max_lr / self.div_start

    @property
    def final_lr(self) -> float:
        return self.max_lr / self.div_final


def one_cycle_lr(step: int, total_steps: int, cfg: OneCycle = OneCycle()) -> float:
    """Linear ramp start_lr -> max_lr up to ``floor(pct_warm * total)``, then cosine to final_lr."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = int(math.floor(cfg.pct_warm * total_steps))
    if step <= peak:
        if peak == 0:
            return cfg.max_lr
        return cfg.start_lr + (cfg.max_lr - cfg.start_lr) * step / peak
    span = total_steps - 1 - peak
    frac = (step - peak) / span
    return cfg.final_lr + (cfg.max_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
