"""Namespaced configuration.

Config files hold one ``namespace.key = value`` per line; ``#`` starts a
comment. Values are parsed according to the field's type. Unknown keys are
an error, never silently ignored. Namespaces: model, mask, text, paired,
train, finetune, label, decode, diag.

Defaults are desk scale. Where the full-scale setting differs it is noted
next to the field.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

from .decode import DecodeConfig
from .encoder import ModelConfig
from .masking import MaskSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    speech_prob: float = 0.08
    speech_span: int = 10
    text_prob: float = 0.05  # 0.15
    text_span: int = 12  # 40

    @property
    def speech(self) -> MaskSpec:
        return MaskSpec(self.speech_prob, self.speech_span)

    @property
    def text(self) -> MaskSpec:
        return MaskSpec(self.text_prob, self.text_span)


@dataclass(frozen=True)
class TextConfig:
    sil_rate: float = 0.25
    cutoff: float = 0.98
    oov: str = "skip"  # or "spell"
    max_repeat_report: int = 20


@dataclass(frozen=True)
class PairedConfig:
    swap_prob: float = 0.3
    # also score the swapped (text-sourced) spans against the utterance's labels;
    # false restricts the paired loss to masked frames
    swapped_loss: bool = True


ALIGN_FUNCTIONS = ("swap", "ce_loss", "cross_attention")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    warmup_steps: int = 50  # 32k (iteration 1) / 64k (iteration 2)
    peak_lr: float = 2e-3  # 5e-4
    batch_frames: int = 400  # 87.5 s of audio per device = 8750 frames
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    ctc_start_step: int = 100  # 50000
    use_mlm: bool = True
    use_ctc: bool = True
    use_char_layer: bool = True
    paired_hours: float = 100.0  # 100 h = every paired utterance; 0 disables the task
    align_fn: str = "swap"
    mlm_weight: float = 1.0
    ctc_weight: float = 1.0
    ce_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.steps:
            raise ConfigError("warmup_steps must not exceed steps")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.align_fn not in ALIGN_FUNCTIONS:
            raise ConfigError(f"align_fn must be one of {ALIGN_FUNCTIONS}")


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    peak_lr: float = 1e-3
    warm_fraction: float = 0.10
    hold_fraction: float = 0.40
    decay_fraction: float = 0.50
    floor_ratio: float = 0.05
    use_char_layer: bool = True
    use_char_head: bool = True
    freeze_steps: int = 0  # steps during which only the char.* parameters train
    batch_frames: int = 400
    mask_prob: float = 0.0
    mask_span: int = 10
    grad_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        total = self.warm_fraction + self.hold_fraction + self.decay_fraction
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"tri-stage fractions must sum to 1, got {total}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.warm_fraction, self.hold_fraction, self.decay_fraction)


@dataclass(frozen=True)
class LabelConfig:
    clusters_iter1: int = 16  # 100
    clusters_iter2: int = 32  # 500
    layer: int = -1  # -1: last speech-encoder layer
    kmeans_iters: int = 50


@dataclass(frozen=True)
class DiagConfig:
    band: float = 0.1
    out_rows: int = 32
    out_cols: int = 32


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    text: TextConfig = field(default_factory=TextConfig)
    paired: PairedConfig = field(default_factory=PairedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)

    def with_overrides(self, overrides: Mapping[str, str] | Iterable[str]) -> "Config":
        if not isinstance(overrides, Mapping):
            overrides = dict(_split_assignment(o) for o in overrides)
        grouped: dict[str, dict[str, object]] = {}
        for key, raw in overrides.items():
            ns, _, name = key.partition(".")
            section = _section(self, ns, key)
            hints = typing.get_type_hints(type(section))
            if not name or name not in {f.name for f in fields(section)}:
                raise ConfigError(f"unknown config key {key!r}")
            grouped.setdefault(ns, {})[name] = _coerce(raw, hints[name], key)
        cfg = self
        for ns, changes in grouped.items():
            try:
                cfg = replace(cfg, **{ns: replace(getattr(cfg, ns), **changes)})
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{ns}: {exc}") from None
        return cfg

    def items(self) -> list[tuple[str, object]]:
        out = []
        for f in fields(self):
            section = getattr(self, f.name)
            for sf in fields(section):
                out.append((f"{f.name}.{sf.name}", getattr(section, sf.name)))
        return out


def _section(cfg: Config, ns: str, key: str):
    if ns not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown config namespace in {key!r}")
    return getattr(cfg, ns)


def _split_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    k, _, v = text.partition("=")
    return k.strip(), v.strip()


def _coerce(raw, typ, key: str):
    if not isinstance(raw, str):
        return raw
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            k, v = _split_assignment(line)
        except ConfigError:
            raise ConfigError(f"line {lineno}: expected namespace.key = value") from None
        out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
    cfg = Config()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text(encoding="utf-8")))
    return cfg.with_overrides(list(overrides))


def dump_config(cfg: Config) -> str:
    lines = []
    for key, value in cfg.items():
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


__all__ = [
    "Config",
    "ConfigError",
    "DiagConfig",
    "FinetuneConfig",
    "LabelConfig",
    "MaskConfig",
    "PairedConfig",
    "TextConfig",
    "TrainConfig",
    "dump_config",
    "load_config",
    "parse_config_text",
]
