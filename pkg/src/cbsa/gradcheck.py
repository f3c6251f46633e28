"""Central finite-difference checks for the autodiff engine.

Used by the test-suite and the acceptance runner; kept in the package so
downstream code can check new ops the same way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

H = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7
SMALL = 1e-3


@dataclass
class GradReport:
    n_checked: int
    n_failed: int
    worst_rel: float
    worst_abs_small: float

    @property
    def ok(self) -> bool:
        return self.n_failed == 0


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    with T.Tape() as tape:
        out = fn()
        grads = T.backward(tape, out)
    return [grads.get(id(p), np.zeros_like(p.data)).copy() for p in params]


def numeric_grads(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = H) -> list[np.ndarray]:
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().data.item()
            flat[i] = orig - h
            down = fn().data.item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def compare(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> GradReport:
    """Relative error below ``REL_TOL``; entries whose magnitude is under ``SMALL`` need absolute error below ``ABS_TOL``."""
    checked = failed = 0
    worst_rel = worst_abs = 0.0
    for a, n in zip(analytic, numeric):
        a, n = a.reshape(-1), n.reshape(-1)
        mag = np.maximum(np.abs(a), np.abs(n))
        err = np.abs(a - n)
        small = mag < SMALL
        rel = np.where(small, 0.0, err / np.where(small, 1.0, mag))
        bad = np.where(small, err >= ABS_TOL, rel >= REL_TOL)
        checked += a.size
        failed += int(bad.sum())
        if a.size:
            worst_rel = max(worst_rel, float(rel.max()))
            worst_abs = max(worst_abs, float(np.where(small, err, 0.0).max()))
    return GradReport(checked, failed, worst_rel, worst_abs)


def check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = H) -> GradReport:
    return compare(analytic_grads(fn, params), numeric_grads(fn, params, h))


GRAPH_OPS = ("matmul", "add", "mul", "sigmoid", "log", "pow", "softmax_rows", "l2_normalize_rows")


def random_graph(rng: np.random.Generator, n_ops: int = 6) -> tuple[list[Tensor], Callable[[], Tensor], list[str]]:
    """A random composite graph over :data:`GRAPH_OPS` ending in a weighted sum.

    Returns ``(params, fn, ops)``. Domains are respected by construction: ``log``
    and ``pow`` act on a sigmoid-squashed, strictly positive branch.
    """
    m, k, n = rng.integers(2, 5, size=3)
    A = T.parameter(rng.normal(size=(m, k)))
    B = T.parameter(rng.normal(size=(k, n)))
    c = T.parameter(rng.normal(size=(m, n)))
    M = T.parameter(rng.normal(scale=0.5, size=(n, n)))
    weights = T.tensor(rng.normal(size=(m, n)))
    ops = list(rng.choice(GRAPH_OPS, size=n_ops))
    gammas = rng.uniform(0.5, 3.0, size=n_ops)
    temps = rng.uniform(0.5, 2.0, size=n_ops)

    def fn() -> Tensor:
        x = T.matmul(A, B)
        for op, gamma, temp in zip(ops, gammas, temps):
            if op == "matmul":
                x = T.matmul(x, M)
            elif op == "add":
                x = x + c
            elif op == "mul":
                x = x * c
            elif op == "sigmoid":
                x = T.sigmoid(x)
            elif op == "log":
                x = T.log(T.sigmoid(x) + 0.1)
            elif op == "pow":
                x = T.power(T.sigmoid(x), float(gamma))
            elif op == "softmax_rows":
                x = T.softmax_rows(x, float(temp))
            elif op == "l2_normalize_rows":
                x = T.l2_normalize_rows(x + c)
        return T.tsum(x * weights)

    return [A, B, c, M], fn, ops


def full_chain(seed: int = 0, C: int = 4, d: int = 8, HW: int = 4, B: int = 2):
    """Prompt -> text encoder -> decoder -> cosine -> sigmoid -> ASL on a small model.

    Zero-initialised decoder projections are perturbed so every branch carries
    gradient. Returns ``(params, fn)``.
    """
    from .encoders import ClassDictionary
    from .losses import sup_alignment_loss
    from .model import CBSAModel, ModelConfig

    rng = np.random.default_rng(seed)
    classes = ClassDictionary.create(C, d, rng)
    cfg = ModelConfig(d=d, n_heads=2, decoder_layers=2, text_depth=2, prompt_length=2, K=2, ablation="tp+saa")
    model = CBSAModel(cfg, classes, seed)
    for _, p in model.named_parameters():
        p.data += rng.normal(scale=0.1, size=p.data.shape)
    feats = rng.normal(size=(B, HW, d))
    feats /= np.linalg.norm(feats, axis=-1, keepdims=True)
    g, l = model.pool_maps(feats)
    y = (rng.random((B, C)) < 0.5).astype(np.int64)

    def fn() -> Tensor:
        return sup_alignment_loss(model.scores(g, l), y)

    return model.parameters(), fn
