"""Run configuration: one YAML file, ``CBSA_*`` environment overrides, CLI flags on top.

Precedence is flag > environment > file > default. The file layout mirrors the
sections of :class:`RunConfig`::

    seed: 1
    data:    {C: 12, K_true: 3, n_total: 600, p: 0.05, ...}
    model:   {ablation: full, prompt_length: 8, ...}
    align:   {logit_scale: 10.0, temperature: 0.07}
    loss:    {gamma_pos: 0.0, gamma_neg: 2.0}
    cat:     {rho: 0.9}
    context: {K: 3, tau: 0.9, aux_weight: 1.0}
    train:   {batch_size: 8, max_lr: 0.001, ...}
    paths:   {data: null, out: runs/default}

Environment variables name a key as ``CBSA_<SECTION>_<KEY>`` (for example
``CBSA_TRAIN_MAX_LR=5e-4``) or ``CBSA_SEED`` / ``CBSA_THREADS`` for the top level.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .alignment import AlignmentConfig
from .data import SyntheticSpec
from .losses import ASLParams
from .model import ModelConfig
from .train import TrainConfig

ENV_PREFIX = "CBSA_"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    C: int = 12
    K_true: int = 3
    d: int = 32
    H: int = 4
    W: int = 4
    labels_per_context: Optional[list] = None
    positives_range: list = field(default_factory=lambda: [1, 3])
    cross_context_leak: float = 0.03
    noise_weak: float = 0.05
    noise_strong: float = 0.2
    mask_fraction: float = 0.25
    appearance_noise: float = 0.05
    n_total: int = 600
    n_val: int = 200
    p: float = 0.05


@dataclass
class ModelSection:
    ablation: str = "full"
    n_heads: int = 4
    decoder_layers: int = 2
    text_depth: int = 2
    prompt_length: int = 8
    class_specific: bool = True
    prompt_init_std: float = 0.02


@dataclass
class AlignSection:
    logit_scale: float = 10.0
    temperature: float = 0.07


@dataclass
class LossSection:
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0


@dataclass
class CatSection:
    rho: float = 0.9


@dataclass
class ContextSection:
    K: int = 3
    tau: float = 0.9
    aux_weight: float = 1.0
    # n_k counts images whose only label is k instead of images containing k
    literal_only: bool = False


@dataclass
class TrainSection:
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


@dataclass
class PathsSection:
    data: Optional[str] = None
    out: str = "runs/default"


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "align": AlignSection,
    "loss": LossSection,
    "cat": CatSection,
    "context": ContextSection,
    "train": TrainSection,
    "paths": PathsSection,
}
TOP_LEVEL = {"seed": 1, "threads": 1}


@dataclass
class RunConfig:
    seed: int = 1
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    align: AlignSection = field(default_factory=AlignSection)
    loss: LossSection = field(default_factory=LossSection)
    cat: CatSection = field(default_factory=CatSection)
    context: ContextSection = field(default_factory=ContextSection)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- views onto the component configs -----------------------------------

    def spec(self, seed: Optional[int] = None) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(
            C=d.C, K_true=d.K_true, d=d.d, H=d.H, W=d.W,
            labels_per_context=d.labels_per_context,
            positives_range=tuple(d.positives_range),
            cross_context_leak=d.cross_context_leak,
            noise_weak=d.noise_weak, noise_strong=d.noise_strong,
            mask_fraction=d.mask_fraction, appearance_noise=d.appearance_noise,
            seed=self.seed if seed is None else seed,
        )

    def model_config(self, ablation: Optional[str] = None) -> ModelConfig:
        m = self.model
        return ModelConfig(
            d=self.data.d, n_heads=m.n_heads, decoder_layers=m.decoder_layers, text_depth=m.text_depth,
            prompt_length=m.prompt_length, class_specific=m.class_specific, prompt_init_std=m.prompt_init_std,
            K=self.context.K, ablation=ablation or m.ablation,
        )

    def align_config(self) -> AlignmentConfig:
        return AlignmentConfig(self.align.logit_scale, self.align.temperature)

    def asl_params(self) -> ASLParams:
        return ASLParams(self.loss.gamma_pos, self.loss.gamma_neg)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        return TrainConfig(
            **dataclasses.asdict(self.train),
            gamma_pos=self.loss.gamma_pos, gamma_neg=self.loss.gamma_neg,
            rho=self.cat.rho, context_tau=self.context.tau, aux_weight=self.context.aux_weight,
            seed=self.seed if seed is None else seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: Union[str, Path]) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Convert ``value`` to the type of ``default``; strings are parsed as YAML scalars first."""
    if isinstance(value, str) and not isinstance(default, str):
        value = yaml.safe_load(value)
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            raise TypeError
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return list(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot interpret {value!r} as {type(default).__name__}") from None
    return value  # Optional fields default to None: keep whatever YAML produced


def _apply(cfg: RunConfig, section: Optional[str], key: str, value: Any, origin: str) -> None:
    if section is None:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{origin}: unknown top-level key {key!r}")
        setattr(cfg, key, _coerce(value, TOP_LEVEL[key], f"{origin}: {key}"))
        return
    if section not in SECTIONS:
        raise ConfigError(f"{origin}: unknown section {section!r}")
    target = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    default = getattr(SECTIONS[section](), key)
    setattr(target, key, _coerce(value, default, f"{origin}: {section}.{key}"))


def apply_mapping(cfg: RunConfig, mapping: Mapping[str, Any], origin: str) -> RunConfig:
    for top, value in mapping.items():
        if top in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, Mapping):
                raise ConfigError(f"{origin}: section {top!r} must be a mapping")
            for key, v in value.items():
                _apply(cfg, top, key, v, origin)
        else:
            _apply(cfg, None, top, value, origin)
    return cfg


def _env_key(name: str) -> tuple[Optional[str], str]:
    rest = name[len(ENV_PREFIX):]
    lowered = rest.lower()
    if lowered in TOP_LEVEL:
        return None, lowered
    section, sep, key = rest.partition("_")
    if not sep or section.lower() not in SECTIONS:
        raise ConfigError(f"environment: cannot map {name} to a config key")
    fields = {f.name.lower(): f.name for f in dataclasses.fields(SECTIONS[section.lower()])}
    if key.lower() not in fields:
        raise ConfigError(f"environment: unknown key {section.lower()}.{key.lower()} from {name}")
    return section.lower(), fields[key.lower()]


def apply_env(cfg: RunConfig, environ: Mapping[str, str]) -> RunConfig:
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            section, key = _env_key(name)
            _apply(cfg, section, key, environ[name], f"environment {name}")
    return cfg


def load_config(
    path: Union[str, Path, None] = None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Resolve defaults, then the file, then ``CBSA_*`` variables, then ``overrides``.

    ``overrides`` uses dotted keys (``"train.max_lr"``) or top-level names (``"seed"``).
    """
    cfg = RunConfig()
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
        if raw is not None:
            if not isinstance(raw, Mapping):
                raise ConfigError(f"{path}: top level must be a mapping")
            apply_mapping(cfg, raw, str(path))
    apply_env(cfg, os.environ if environ is None else environ)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.rpartition(".")
        _apply(cfg, section or None, key, value, "command line")
    return cfg
