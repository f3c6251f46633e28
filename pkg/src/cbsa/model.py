"""The full scoring model with the ablation switches of the module study.

Ablation modes:

``none``    linear multi-label head on the pooled feature (no prompts)
``tp``      target prompt aligned with the pooled global feature
``tp+saa``  semantic-aware prompts -> decoder -> label-specific features
``full``    ``tp+saa`` plus the context-identification head
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .alignment import AlignmentConfig, alignment_degrees, extract_label_specific, global_alignment_degrees
from .context import ContextHead, context_forward
from .encoders import AttentionPool, ClassDictionary, FrozenTextEncoder, PromptSet, encode_text, encode_text_pair, pool_features
from .nn import LinearLayer, TransformerDecoder
from .tensor import Tensor

ABLATIONS = ("none", "tp", "tp+saa", "full")

# init substreams; each component draws from its own so toggling one leaves the others bit-identical
_TEXT, _POOL, _PROMPTS, _DECODER, _CONTEXT, _BASELINE = range(6)


def ablation_flags(mode: str) -> tuple[bool, bool, bool]:
    """``(TP, SAA, CI)`` for an ablation mode."""
    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation {mode!r}; choose from {ABLATIONS}")
    return mode != "none", mode in ("tp+saa", "full"), mode == "full"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_heads: int = 4
    decoder_layers: int = 2
    text_depth: int = 2
    prompt_length: int = 8
    class_specific: bool = True
    prompt_init_std: float = 0.02
    K: int = 3
    ablation: str = "full"


class CBSAModel:
    def __init__(self, cfg: ModelConfig, classes: ClassDictionary, seed: int, align: AlignmentConfig = AlignmentConfig()):
        self.cfg = cfg
        self.align = align
        self.classes = classes
        self.tp, self.saa, self.ci = ablation_flags(cfg.ablation)
        C, d = classes.C, cfg.d

        def rng(component: int) -> np.random.Generator:
            return np.random.default_rng(np.random.SeedSequence([seed, 1, component]))

        self.text_encoder = FrozenTextEncoder(d, rng(_TEXT), depth=cfg.text_depth, n_heads=cfg.n_heads)
        self.pool = AttentionPool(d, rng(_POOL), n_heads=cfg.n_heads)
        self.prompts = PromptSet(C, cfg.prompt_length, d, rng(_PROMPTS), cfg.class_specific, cfg.prompt_init_std) if self.tp else None
        self.decoder = TransformerDecoder(d, cfg.decoder_layers, cfg.n_heads, rng(_DECODER)) if self.saa else None
        self.context_head = ContextHead(d, cfg.K, rng(_CONTEXT)) if self.ci else None
        self.baseline = LinearLayer(d, C, rng(_BASELINE), std=0.02) if not self.tp else None

    # -- parameters --------------------------------------------------------

    def named_parameters(self):
        if self.prompts is not None:
            if self.saa:
                yield from self.prompts.named_parameters()
            else:
                yield "prompts.target", self.prompts.target_tokens
        if self.decoder is not None:
            yield from self.decoder.named_parameters("decoder.")
        if self.context_head is not None:
            yield from self.context_head.named_parameters("context_head.")
        if self.baseline is not None:
            yield from self.baseline.named_parameters("baseline.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def alignment_parameters(self) -> list[Tensor]:
        return [p for n, p in self.named_parameters() if not n.startswith("context_head.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise KeyError(f"state keys {sorted(state)} do not match model keys {sorted(params)}")
        for n, p in params.items():
            if p.data.shape != state[n].shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.data.shape}")
            p.data[...] = state[n]

    # -- forward -----------------------------------------------------------

    def pool_maps(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return pool_features(features, self.pool)

    def text_embeddings(self) -> tuple[Optional[Tensor], Optional[Tensor]]:
        if not self.tp:
            return None, None
        if self.saa:
            return encode_text_pair(self.prompts, self.classes, self.text_encoder)
        return None, encode_text(self.prompts, self.classes, self.text_encoder, "target")

    def scores(self, g, l, text: Optional[tuple] = None) -> Tensor:
        """Alignment degrees ``B x C`` for pooled features ``g`` (B x d) and ``l`` (B x HW x d)."""
        g = g if isinstance(g, Tensor) else T.tensor(g)
        if not self.tp:
            return T.sigmoid(self.baseline(g))
        t_s, t_t = text if text is not None else self.text_embeddings()
        if self.saa:
            l = l if isinstance(l, Tensor) else T.tensor(l)
            z = extract_label_specific(l, t_s, self.decoder)
            return alignment_degrees(z, t_t, self.align)
        return global_alignment_degrees(g, t_t, self.align)

    def context_probs(self, g) -> Optional[Tensor]:
        if self.context_head is None:
            return None
        return context_forward(g, self.context_head)

    def predict(self, features: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Forward-only scores for raw feature maps, evaluated in fixed-order chunks."""
        text = self.text_embeddings()
        out = []
        for start in range(0, features.shape[0], chunk):
            g, l = self.pool_maps(features[start : start + chunk])
            out.append(self.scores(g, l, text).data)
        return np.concatenate(out, axis=0)

    def predict_context(self, features: np.ndarray) -> Optional[np.ndarray]:
        if self.context_head is None:
            return None
        g, _ = self.pool_maps(features)
        return self.context_probs(g).data
