"""Neural building blocks on top of :mod:`cbsa.tensor`.

Every block accepts inputs with arbitrary leading batch axes, e.g. queries of
shape ``(C, d)`` against memory of shape ``(B, HW, d)``; broadcasting in
``matmul`` handles the rest.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

LN_EPS = 1e-6


class Module:
    """Minimal parameter container. Subclasses list child blocks in ``_children``."""

    trainable: bool = True
    _children: tuple[str, ...] = ()
    _params: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "", include_frozen: bool = False) -> Iterator[tuple[str, Tensor]]:
        if not self.trainable and not include_frozen:
            return
        for name in self._params:
            yield prefix + name, getattr(self, name)
        for name in self._children:
            child = getattr(self, name)
            if isinstance(child, (list, tuple)):
                for i, c in enumerate(child):
                    yield from c.named_parameters(f"{prefix}{name}.{i}.", include_frozen)
            elif child is not None:
                yield from child.named_parameters(f"{prefix}{name}.", include_frozen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> "Module":
        self.trainable = False
        for _, p in self.named_parameters(include_frozen=True):
            p.requires_grad = False
        for name in self._children:
            child = getattr(self, name)
            for c in child if isinstance(child, (list, tuple)) else [child]:
                if c is not None:
                    c.freeze()
        return self


class LinearLayer(Module):
    _params = ("weight", "bias")

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False, std: Optional[float] = None):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, std if std is not None else 1.0 / math.sqrt(d_in), size=(d_in, d_out))
        self.weight = T.parameter(w)
        self.bias = T.parameter(np.zeros(d_out))
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear: input width {x.shape[-1]} != {self.d_in} (input shape {x.shape})")
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    _params = ("gain", "bias")

    def __init__(self, d: int):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain/bias."""
    return T.layer_norm(x, gain, bias, eps)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, h, d // h))
    k = len(lead)
    return T.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = T.transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return T.reshape(x, (*lead, n, h * dh))


class MultiHeadAttention(Module):
    _children = ("q_proj", "k_proj", "v_proj", "o_proj")

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, zero_output: bool = False):
        if d % n_heads:
            raise DimensionError(f"n_heads={n_heads} does not divide d={d}")
        self.d, self.n_heads = d, n_heads
        self.q_proj = LinearLayer(d, d, rng)
        self.k_proj = LinearLayer(d, d, rng)
        self.v_proj = LinearLayer(d, d, rng)
        self.o_proj = LinearLayer(d, d, rng, zero=zero_output)

    def attention_weights(self, q: Tensor, k: Tensor) -> Tensor:
        qh = _split_heads(self.q_proj(q), self.n_heads)
        kh = _split_heads(self.k_proj(k), self.n_heads)
        scale = 1.0 / math.sqrt(self.d // self.n_heads)
        return T.softmax(T.matmul(qh, T.transpose(kh)) * scale, axis=-1)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return attention(q, k, v, self)


def attention(q: Tensor, k: Tensor, v: Tensor, mha: MultiHeadAttention) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated, output-projected."""
    for name, x in (("query", q), ("key", k), ("value", v)):
        if x.shape[-1] != mha.d:
            raise DimensionError(f"attention: {name} width {x.shape[-1]} != model width {mha.d}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: key rows {k.shape} and value rows {v.shape} differ")
    w = mha.attention_weights(q, k)
    vh = _split_heads(mha.v_proj(v), mha.n_heads)
    return mha.o_proj(_merge_heads(T.matmul(w, vh)))


class FeedForward(Module):
    _children = ("fc1", "fc2")

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, zero_output: bool = False):
        self.fc1 = LinearLayer(d, hidden, rng)
        self.fc2 = LinearLayer(hidden, d, rng, zero=zero_output)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class DecoderLayer(Module):
    """Pre-norm cross-attention + feed-forward layer, no query self-attention.

    Output projections start at zero, so a fresh layer is the identity on queries.
    """

    _children = ("norm_q", "cross_attn", "norm_ff", "feed_forward")

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, ff_mult: int = 2, zero_init: bool = True):
        self.norm_q = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng, zero_output=zero_init)
        self.norm_ff = LayerNorm(d)
        self.feed_forward = FeedForward(d, ff_mult * d, rng, zero_output=zero_init)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        x = queries + self.cross_attn(self.norm_q(queries), memory, memory)
        return x + self.feed_forward(self.norm_ff(x))


class TransformerDecoder(Module):
    _children = ("layers",)

    def __init__(self, d: int, n_layers: int = 2, n_heads: int = 4, rng: Optional[np.random.Generator] = None, zero_init: bool = True):
        if n_layers < 1:
            raise ValueError("decoder needs at least one layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = d
        self.layers = [DecoderLayer(d, n_heads, rng, zero_init=zero_init) for _ in range(n_layers)]

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        return decoder_forward(queries, memory, self.layers)


def decoder_forward(queries: Tensor, memory: Tensor, layers: Sequence[DecoderLayer]) -> Tensor:
    if not layers:
        raise ValueError("decoder_forward needs at least one layer")
    if queries.shape[-1] != memory.shape[-1]:
        raise DimensionError(f"decoder: query width {queries.shape[-1]} != memory width {memory.shape[-1]}")
    x = queries
    for layer in layers:
        x = layer(x, memory)
    return x


class EncoderLayer(Module):
    """Pre-norm self-attention block used by the frozen text encoder."""

    _children = ("norm_attn", "self_attn", "norm_ff", "feed_forward")

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, ff_mult: int = 2):
        self.norm_attn = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.norm_ff = LayerNorm(d)
        self.feed_forward = FeedForward(d, ff_mult * d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.self_attn(h, h, h)
        return x + self.feed_forward(self.norm_ff(x))
