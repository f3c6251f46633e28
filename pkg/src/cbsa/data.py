"""Synthetic multi-label feature maps with planted label contexts."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .encoders import ClassDictionary

# substream ids under the data seed
_WORLD, _INSTANCE, _VAL, _SPLIT = 0, 1, 2, 3


class SpecError(ValueError):
    pass


def default_blocks(C: int, K: int) -> list[list[int]]:
    edges = np.linspace(0, C, K + 1).round().astype(int)
    return [list(range(edges[i], edges[i + 1])) for i in range(K)]


@dataclass
class SyntheticSpec:
    C: int = 12
    K_true: int = 3
    d: int = 32
    H: int = 4
    W: int = 4
    labels_per_context: Optional[list[list[int]]] = None
    positives_range: tuple[int, int] = (1, 3)
    cross_context_leak: float = 0.03
    noise_weak: float = 0.05
    noise_strong: float = 0.2
    mask_fraction: float = 0.25
    appearance_noise: float = 0.05
    seed: int = 1

    def __post_init__(self):
        if self.labels_per_context is None:
            self.labels_per_context = default_blocks(self.C, self.K_true)
        self.labels_per_context = [list(map(int, b)) for b in self.labels_per_context]
        self.positives_range = tuple(int(v) for v in self.positives_range)

    @property
    def HW(self) -> int:
        return self.H * self.W

    def validate(self) -> None:
        blocks = self.labels_per_context
        if len(blocks) != self.K_true:
            raise SpecError(f"{len(blocks)} label blocks for K_true={self.K_true}")
        if sorted(c for b in blocks for c in b) != list(range(self.C)):
            raise SpecError("labels_per_context must partition range(C)")
        lo, hi = self.positives_range
        if not 1 <= lo <= hi:
            raise SpecError(f"positives_range must satisfy 1 <= min <= max, got {self.positives_range}")
        smallest = min(len(b) for b in blocks)
        if hi > smallest:
            raise SpecError(f"positives_range max {hi} exceeds smallest context block ({smallest} labels)")
        if hi > self.HW:
            raise SpecError(f"positives_range max {hi} exceeds H*W={self.HW}")
        if not 0 <= self.cross_context_leak < 1:
            raise SpecError("cross_context_leak must be in [0, 1)")
        if not 0 <= self.noise_weak < self.noise_strong:
            raise SpecError("need 0 <= noise_weak < noise_strong")
        if not 0 <= self.mask_fraction < 1:
            raise SpecError("mask_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["positives_range"] = list(self.positives_range)
        return out


@dataclass
class Instance:
    f: np.ndarray  # HW x d, unit rows
    y: np.ndarray  # C, 0/1
    true_context: int


@dataclass
class World:
    """Fixed vectors shared by every instance: class prototypes and context backgrounds."""

    classes: ClassDictionary
    backgrounds: np.ndarray  # K_true x d


@dataclass
class SyntheticDataset:
    features: np.ndarray  # n x HW x d
    labels: np.ndarray  # n x C, uint8
    contexts: np.ndarray  # n

    def __len__(self) -> int:
        return self.features.shape[0]

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Instance:
        return Instance(self.features[i], self.labels[i], int(self.contexts[i]))

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SyntheticDataset(self.features[idx], self.labels[idx], self.contexts[idx])

    @classmethod
    def stack(cls, instances: Sequence[Instance]) -> "SyntheticDataset":
        return cls(
            np.stack([i.f for i in instances]),
            np.stack([i.y for i in instances]).astype(np.uint8),
            np.array([i.true_context for i in instances], dtype=np.int64),
        )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def make_world(spec: SyntheticSpec) -> World:
    rng = _stream(spec.seed, _WORLD)
    classes = ClassDictionary.create(spec.C, spec.d, rng)
    backgrounds = _unit_rows(rng.normal(size=(spec.K_true, spec.d)))
    return World(classes, backgrounds)


def _generate_one(spec: SyntheticSpec, world: World, rng: np.random.Generator) -> Instance:
    ctx = int(rng.integers(spec.K_true))
    block = spec.labels_per_context[ctx]
    lo, hi = spec.positives_range
    count = int(rng.integers(lo, hi + 1))
    picked = [int(c) for c in rng.choice(block, size=count, replace=False)]
    outside = [c for c in range(spec.C) if c not in block]
    labels: list[int] = []
    for c in picked:
        if outside and rng.random() < spec.cross_context_leak:
            free = [o for o in outside if o not in labels]
            c = int(rng.choice(free))
        labels.append(c)
    rows = rng.permutation(spec.HW)
    f = np.repeat(world.backgrounds[ctx][None, :], spec.HW, axis=0)
    for r, c in zip(rows, labels):
        f[r] = world.classes.prototypes[c]
    f = f + rng.normal(size=f.shape) * spec.appearance_noise
    # float32-exact values so CBSF round trips reproduce the in-memory data
    f = _unit_rows(f).astype(np.float32).astype(np.float64)
    y = np.zeros(spec.C, dtype=np.uint8)
    y[labels] = 1
    return Instance(f, y, ctx)


def generate(spec: SyntheticSpec, n_total: int, world: Optional[World] = None, stream: int = _INSTANCE) -> SyntheticDataset:
    """Draw ``n_total`` instances; instance ``i`` uses its own stream ``(seed, stream, i)``."""
    if n_total < 1:
        raise SpecError("n_total must be >= 1")
    spec.validate()
    world = world if world is not None else make_world(spec)
    return SyntheticDataset.stack([_generate_one(spec, world, _stream(spec.seed, stream, i)) for i in range(n_total)])


def generate_validation(spec: SyntheticSpec, n_val: int, world: Optional[World] = None) -> SyntheticDataset:
    return generate(spec, n_val, world, stream=_VAL)


def augment(f: np.ndarray, kind: str, rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Weak: small Gaussian jitter. Strong: larger jitter plus row cutout.

    Works on one ``HW x d`` map or a batch ``B x HW x d``. Cutout rows are
    replaced with the map's own background estimate, the normalized mean row.
    """
    f = np.asarray(f, dtype=np.float64)
    if kind == "weak":
        sigma, n_mask = spec.noise_weak, 0
    elif kind == "strong":
        sigma, n_mask = spec.noise_strong, int(math.floor(spec.mask_fraction * f.shape[-2]))
    else:
        raise ValueError(f"unknown augmentation {kind!r}")
    out = _unit_rows(f + rng.normal(size=f.shape) * sigma) if sigma > 0 else f.copy()
    if n_mask:
        batch = out.reshape(-1, *out.shape[-2:])
        src = f.reshape(batch.shape)
        for b in range(batch.shape[0]):
            rows = rng.choice(batch.shape[1], size=n_mask, replace=False)
            batch[b, rows] = _unit_rows(src[b].mean(axis=0))
        out = batch.reshape(out.shape)
    return out


@dataclass
class Split:
    labeled: np.ndarray
    unlabeled: np.ndarray


def split_indices(n_total: int, p: float, seed: int) -> Split:
    """``ceil(p * n)`` labeled indices drawn at random, the rest unlabeled (both sorted)."""
    if not 0 < p < 1:
        raise SpecError(f"labeled proportion must be in (0, 1), got {p}")
    m = min(n_total, math.ceil(p * n_total - 1e-9))
    perm = _stream(seed, _SPLIT).permutation(n_total)
    return Split(np.sort(perm[:m]), np.sort(perm[m:]))


@dataclass
class SSLData:
    """Labeled/unlabeled views of one dataset plus a sealed truth channel for metrics."""

    features_l: np.ndarray
    labels_l: np.ndarray
    features_u: np.ndarray
    _truth_u: np.ndarray = field(repr=False)
    features_val: np.ndarray = field(repr=False, default=None)
    labels_val: np.ndarray = field(repr=False, default=None)
    contexts_val: Optional[np.ndarray] = field(repr=False, default=None)

    def unlabeled_truth(self) -> np.ndarray:
        """Ground truth of the unlabeled pool; metric code only."""
        return self._truth_u

    @classmethod
    def from_split(cls, data: SyntheticDataset, sp: Split, val: Optional[SyntheticDataset] = None) -> "SSLData":
        return cls(
            data.features[sp.labeled],
            data.labels[sp.labeled].astype(np.uint8),
            data.features[sp.unlabeled],
            data.labels[sp.unlabeled].astype(np.uint8),
            None if val is None else val.features,
            None if val is None else val.labels,
            None if val is None else val.contexts,
        )


def split(data: SyntheticDataset, p: float, seed: int, val: Optional[SyntheticDataset] = None) -> SSLData:
    """Labeled/unlabeled split; unlabeled labels go only to the sealed truth channel."""
    return SSLData.from_split(data, split_indices(len(data), p, seed), val)
