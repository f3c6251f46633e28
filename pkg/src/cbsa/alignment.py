"""Label-specific features and one-to-one alignment degrees."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import TransformerDecoder
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class AlignmentConfig:
    logit_scale: float = 10.0
    temperature: float = 0.07

    def __post_init__(self):
        if not (self.logit_scale > 0 and self.temperature > 0):
            raise ValueError(f"logit_scale and temperature must be positive: {self}")


def extract_label_specific(l: Tensor, t_s: Tensor, decoder: TransformerDecoder) -> Tensor:
    """Class-``k`` image feature ``z_k``: the decoder refines ``t_s[k]`` by attending over ``l``.

    ``l`` may carry a leading batch axis, in which case ``z`` is ``B x C x d``.
    """
    return decoder(t_s, l)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine: widths differ, {a.shape} vs {b.shape}")
    return T.tsum(T.l2_normalize(a, axis=-1) * T.l2_normalize(b, axis=-1), axis=-1)


def alignment_degrees(z: Tensor, t_t: Tensor, cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    """``sigmoid(scale * cos(z_k, t_t[k]))`` per class; only index-matched pairs meet."""
    if z.shape[-2:] != t_t.shape[-2:]:
        raise DimensionError(f"alignment: {z.shape} features vs {t_t.shape} text embeddings")
    return T.sigmoid(cosine_rows(z, t_t) * cfg.logit_scale)


def zero_shot_softmax(h, w, cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    """Single-label diagnostic: softmax over cosine(h, w_k) / temperature."""
    h = h if isinstance(h, Tensor) else T.tensor(h)
    w = w if isinstance(w, Tensor) else T.tensor(w)
    cos = T.matmul(T.l2_normalize(w, axis=-1), T.reshape(T.l2_normalize(h, axis=-1), (-1, 1)))
    return T.softmax(T.reshape(cos, (-1,)), axis=-1, temperature=cfg.temperature)


def degrees_numpy(z: np.ndarray, t_t: np.ndarray, cfg: AlignmentConfig = AlignmentConfig()) -> np.ndarray:
    return alignment_degrees(T.tensor(z), T.tensor(t_t), cfg).data


def global_alignment_degrees(g: Tensor, t_t: Tensor, cfg: AlignmentConfig = AlignmentConfig()) -> Tensor:
    """Target-prompt-only variant: every class text embedding meets the pooled feature ``g``."""
    g_rows = T.reshape(T.l2_normalize(g, axis=-1), (*g.shape[:-1], 1, g.shape[-1]))
    cos = T.tsum(g_rows * T.l2_normalize(t_t, axis=-1), axis=-1)
    return T.sigmoid(cos * cfg.logit_scale)
