"""Frozen surrogate encoders, the attention-pooling head and the learnable prompts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import EncoderLayer, LayerNorm, MultiHeadAttention
from .tensor import Tensor

NAME_NOISE = 0.3
PROMPT_INIT_STD = 0.02
# output projections of the frozen text encoder are shrunk so the class-name
# token survives the residual stream; prompts still move the embedding
TEXT_RESIDUAL_SCALE = 0.2
# sharpness of the frozen pool's self-similarity attention
POOL_SHARPNESS = 8.0


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class ClassDictionary:
    """Fixed per-class vectors: image-side prototypes and noisy class-name tokens."""

    prototypes: np.ndarray
    name_embeddings: np.ndarray

    @property
    def C(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    @classmethod
    def create(cls, C: int, d: int, rng: np.random.Generator, name_noise: float = NAME_NOISE) -> "ClassDictionary":
        protos = _unit_rows(rng.normal(size=(C, d)))
        noise = rng.normal(size=(C, d)) * (name_noise / np.sqrt(d))
        names = _unit_rows(protos + noise)
        protos.setflags(write=False)
        names.setflags(write=False)
        return cls(protos, names)

    def permuted(self, perm) -> "ClassDictionary":
        perm = np.asarray(perm)
        return ClassDictionary(self.prototypes[perm], self.name_embeddings[perm])


class PromptSet:
    """Learnable semantic-aware and target context tokens.

    With ``class_specific`` each class owns an ``N x d`` block per prompt kind;
    otherwise one shared block is broadcast to every class.
    """

    def __init__(self, C: int, N: int, d: int, rng: np.random.Generator, class_specific: bool = True, init_std: float = PROMPT_INIT_STD):
        if N < 1:
            raise ValueError(f"prompt length must be >= 1, got {N}")
        self.C, self.N, self.d = C, N, d
        self.class_specific = class_specific
        rows = C if class_specific else 1
        self.semantic_tokens = T.parameter(rng.normal(0.0, init_std, size=(rows, N, d)), name="prompt.semantic")
        self.target_tokens = T.parameter(rng.normal(0.0, init_std, size=(rows, N, d)), name="prompt.target")

    def tokens(self, which: str) -> Tensor:
        if which == "semantic":
            return self.semantic_tokens
        if which == "target":
            return self.target_tokens
        raise ValueError(f"unknown prompt kind {which!r}")

    @property
    def semantic(self) -> np.ndarray:
        return np.broadcast_to(self.semantic_tokens.data, (self.C, self.N, self.d))

    @property
    def target(self) -> np.ndarray:
        return np.broadcast_to(self.target_tokens.data, (self.C, self.N, self.d))

    def named_parameters(self):
        yield "prompts.semantic", self.semantic_tokens
        yield "prompts.target", self.target_tokens

    def parameters(self) -> list[Tensor]:
        return [self.semantic_tokens, self.target_tokens]


class FrozenTextEncoder:
    """Seeded two-layer transformer; reads the last (class-name) position."""

    def __init__(self, d: int, rng: np.random.Generator, depth: int = 2, n_heads: int = 4, residual_scale: float = TEXT_RESIDUAL_SCALE):
        self.layers = [EncoderLayer(d, n_heads, rng) for _ in range(depth)]
        for layer in self.layers:
            layer.self_attn.o_proj.weight.data *= residual_scale
            layer.feed_forward.fc2.weight.data *= residual_scale
            layer.freeze()
        self.final_norm = LayerNorm(d)
        self.final_norm.freeze()
        self.d = d

    def __call__(self, sequences: Tensor) -> Tensor:
        x = sequences
        for layer in self.layers:
            x = layer(x)
        last = x[..., -1, :]
        return T.l2_normalize(self.final_norm(last), axis=-1)


def encode_text(prompts: PromptSet, classes: ClassDictionary, encoder: FrozenTextEncoder, which: str) -> Tensor:
    """Encode ``[v_1..v_N, CLS_k]`` for every class; returns unit rows ``C x d``."""
    tokens = prompts.tokens(which)
    if not prompts.class_specific:
        tokens = T.concat([tokens] * prompts.C, axis=0)
    cls_tok = T.tensor(classes.name_embeddings[:, None, :])
    seq = T.concat([tokens, cls_tok], axis=1)
    return encoder(seq)


def encode_text_pair(prompts: PromptSet, classes: ClassDictionary, encoder: FrozenTextEncoder) -> tuple[Tensor, Tensor]:
    """Semantic and target embeddings from a single encoder pass over ``2C`` sequences."""
    tokens = T.concat([prompts.semantic_tokens, prompts.target_tokens], axis=0)
    if not prompts.class_specific:
        tokens = T.concat([tokens[0:1]] * prompts.C + [tokens[1:2]] * prompts.C, axis=0)
    cls_tok = T.tensor(np.concatenate([classes.name_embeddings] * 2)[:, None, :])
    out = encoder(T.concat([tokens, cls_tok], axis=1))
    return out[: prompts.C], out[prompts.C :]


class AttentionPool:
    """Frozen self-attention over ``[mean(f), f]``.

    Query/key projections are a shared random rotation times a sharpness
    factor, so each position attends to rows similar to itself; the value and
    output projections are that rotation and its inverse, so outputs stay in
    the input feature space.
    """

    def __init__(self, d: int, rng: np.random.Generator, n_heads: int = 4, sharpness: float = POOL_SHARPNESS):
        self.mha = MultiHeadAttention(d, n_heads, rng)
        rot = random_orthogonal(d, rng)
        self.mha.q_proj.weight.data[...] = sharpness * rot
        self.mha.k_proj.weight.data[...] = sharpness * rot
        self.mha.v_proj.weight.data[...] = rot
        self.mha.o_proj.weight.data[...] = rot.T
        self.mha.freeze()
        self.d = d

    def __call__(self, f) -> tuple[Tensor, Tensor]:
        return attention_pool(f, self)


def attention_pool(f, pool: AttentionPool) -> tuple[Tensor, Tensor]:
    """Return ``(g, l)``: the pooled global feature and the per-position local features.

    ``f`` may be ``HW x d`` or batched ``B x HW x d``. Both outputs are
    L2-normalized row-wise.
    """
    f = f if isinstance(f, Tensor) else T.tensor(f)
    if f.shape[-2] < 1:
        raise ValueError("attention_pool needs at least one spatial position")
    seq = T.concat([T.tmean(f, axis=-2, keepdims=True), f], axis=-2)
    out = pool.mha(seq, seq, seq)
    out = T.l2_normalize(out, axis=-1)
    return out[..., 0, :], out[..., 1:, :]


def pool_features(features: np.ndarray, pool: AttentionPool, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Forward-only pooling of an ``n x HW x d`` array, in fixed-order chunks."""
    gs, ls = [], []
    for start in range(0, features.shape[0], chunk):
        g, l = attention_pool(T.tensor(features[start : start + chunk]), pool)
        gs.append(g.data)
        ls.append(l.data)
    return np.concatenate(gs, axis=0), np.concatenate(ls, axis=0)


def make_text_encoder(d: int, rng: Optional[np.random.Generator] = None, depth: int = 2) -> FrozenTextEncoder:
    return FrozenTextEncoder(d, rng if rng is not None else np.random.default_rng(0), depth=depth)
