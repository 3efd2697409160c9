"""Run configurations and named presets.

``full`` presets carry the full-resolution recipe (256x256 synthesis,
1000 px segmentation); ``desk`` presets shrink widths and budgets so the
phantom checks fit on one CPU core.
A YAML file plus ``key=value`` overrides fully determines a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from oarseg.networks.spec import Fusion, NetworkKind, NetworkSpec
from oarseg.taxonomy import NUM_CLASSES


class ConfigError(KeyError):
    """Unknown or malformed configuration key; ``key`` names the offender."""

    def __init__(self, key: str, message: str = ""):
        self.key = key
        super().__init__(message or f"unknown configuration key: {key}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class PreprocessConfig:
    """Center crop, resize and intensity normalization to [-1, 1].

    CT uses a window ``(level, width)`` in HU; MR uses a fixed ``(low, high)``
    intensity range.
    """

    crop: int = 250
    size: int = 256
    ct_window: tuple[float, float] = (40.0, 400.0)
    mr_range: tuple[float, float] = (0.0, 1000.0)

    def __post_init__(self):
        if self.crop < 1 or self.size < 1:
            raise ValueError("crop and size must be positive")
        if self.ct_window[1] <= 0 or self.mr_range[1] <= self.mr_range[0]:
            raise ValueError("normalization window must have positive width")


def _gen(base: int) -> NetworkSpec:
    return NetworkSpec(NetworkKind.GENERATOR, 1, 1, base, 3)


def _disc(base: int, form: str) -> NetworkSpec:
    return NetworkSpec(NetworkKind.DISCRIMINATOR, 1, 1, base, 3, head="sigmoid" if form == "log" else "linear")


def _subnet(base: int) -> NetworkSpec:
    return NetworkSpec(NetworkKind.SEG_SUBNET, 2, NUM_CLASSES, base, 3)


@dataclass(frozen=True)
class SynthesisConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 1
    lambda_content: float = 10.0
    lambda_task: float = 1.0
    gan_form: str = "lsgan"
    steps: int = 2000
    seed: int = 0
    generator: NetworkSpec = field(default_factory=lambda: _gen(64))
    discriminator: NetworkSpec = field(default_factory=lambda: _disc(64, "lsgan"))
    seg_subnet: NetworkSpec = field(default_factory=lambda: _subnet(64))
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    crop_pad: int = 8
    class_weighting: str = "median_frequency"
    pretrain_subnet_steps: int = 0
    checkpoint_every: int = 500
    update_order: tuple[str, ...] = ("D_T", "D_S", "generators", "subnet")

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.gan_form not in ("lsgan", "log"):
            raise ValueError(f"unknown gan_form {self.gan_form!r}")
        if self.class_weighting not in ("median_frequency", "uniform"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")
        if self.update_order != ("D_T", "D_S", "generators", "subnet"):
            raise ValueError("only the D_T, D_S, generators, subnet update order is implemented")
        want = "sigmoid" if self.gan_form == "log" else "linear"
        if self.discriminator.head != want:
            object.__setattr__(self, "discriminator", replace(self.discriminator, head=want))


@dataclass(frozen=True)
class SegTrainConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    base_lr: float = 0.001
    peak_lr: float = 0.01
    warmup_epochs: float = 3.0
    decay_epochs: tuple[float, ...] = (5.0, 10.0)
    decay_factor: float = 0.1
    epochs: int = 18
    roi_batch: int = 256
    rpn_batch: int = 256
    roi_ratio: tuple[int, int] = (1, 3)
    fg_iou: float = 0.5
    scale_jitter: tuple[int, ...] = (800, 900, 1100, 1200)
    flip: bool = True
    seed: int = 0
    fusion: Fusion = Fusion.NONE
    base_channels: int = 16
    anchor_sizes: tuple[float, ...] = (32.0, 64.0, 128.0)
    preprocess: PreprocessConfig = field(default_factory=lambda: PreprocessConfig(crop=512, size=1000))
    cache_synthesis: bool = False
    score_threshold: float = 0.5
    validate_every_epoch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fusion", Fusion(self.fusion))
        if any(d >= self.epochs for d in self.decay_epochs):
            raise ValueError("decay epochs must precede the final epoch")
        if not self.scale_jitter:
            raise ValueError("scale_jitter must be non-empty")
        if self.warmup_epochs < 0 or self.base_lr <= 0 or self.peak_lr <= 0:
            raise ValueError("learning rates must be > 0 and warmup >= 0")


@dataclass(frozen=True)
class SemanticConfig:
    """Segmentation-subnetwork baseline trained directly on CT (weighted vs unweighted CE)."""

    lr: float = 2e-4
    batch_size: int = 8
    steps: int = 1500
    seed: int = 0
    base_channels: int = 16
    in_channels: int = 1
    class_weighting: str = "median_frequency"
    preprocess: PreprocessConfig = field(default_factory=lambda: PreprocessConfig(crop=64, size=64))

    def __post_init__(self):
        if self.class_weighting not in ("median_frequency", "uniform"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")


DESK_PREPROCESS = PreprocessConfig(crop=64, size=64)


def desk_synthesis(**overrides) -> SynthesisConfig:
    cfg = SynthesisConfig(
        steps=1500,
        generator=_gen(16),
        discriminator=_disc(16, "lsgan"),
        seg_subnet=_subnet(16),
        preprocess=DESK_PREPROCESS,
        crop_pad=4,
        checkpoint_every=500,
    )
    return replace(cfg, **overrides)


def full_synthesis(**overrides) -> SynthesisConfig:
    return replace(SynthesisConfig(), **overrides)


def desk_segmentation(**overrides) -> SegTrainConfig:
    cfg = SegTrainConfig(
        warmup_epochs=1.0,
        decay_epochs=(4.0, 5.0),
        epochs=6,
        scale_jitter=(52, 56, 72, 76),
        anchor_sizes=(8.0, 12.0, 18.0),
        preprocess=DESK_PREPROCESS,
    )
    return replace(cfg, **overrides)


def full_segmentation(**overrides) -> SegTrainConfig:
    return replace(SegTrainConfig(), **overrides)


PRESETS = {
    "synthesis": {"desk": desk_synthesis, "full": full_synthesis},
    "segmentation": {"desk": desk_segmentation, "full": full_segmentation},
    "semantic": {"desk": SemanticConfig, "full": lambda **o: SemanticConfig(preprocess=PreprocessConfig(), **o)},
}


# ---------------------------------------------------------------- (de)serialization


def config_to_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, NetworkSpec):
            v = v.to_dict()
        elif is_dataclass(v):
            v = config_to_dict(v)
        elif isinstance(v, Fusion):
            v = v.value
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _coerce(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"configuration section {prefix.rstrip('.') or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        if key not in known:
            raise ConfigError(prefix + key)
        current = getattr(defaults, key)
        if isinstance(current, NetworkSpec):
            merged = {**current.to_dict(), **value} if isinstance(value, dict) else value
            try:
                value = NetworkSpec.from_dict(merged)
            except KeyError as exc:
                bad = sorted(set(value) - {f.name for f in fields(NetworkSpec)})
                raise ConfigError(prefix + key + "." + (bad[0] if bad else "?")) from exc
        elif is_dataclass(current):
            value = _coerce(type(current), value, prefix + key + ".")
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def load_config(kind: str, path=None, preset: str = "desk", overrides: dict | None = None):
    """Preset, then YAML file values, then ``dotted.key: value`` overrides.

    Unknown keys raise :class:`ConfigError` naming the key.
    """
    if kind not in PRESETS:
        raise ConfigError(kind, f"unknown configuration kind {kind!r}")
    if preset not in PRESETS[kind]:
        raise ConfigError("preset", f"unknown preset {preset!r} for {kind}")
    base = PRESETS[kind][preset]()
    data = config_to_dict(base)
    file_data = {}
    if path is not None:
        file_data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(file_data, dict):
            raise ConfigError("<root>", f"{path} must contain a mapping")
    merged = _deep_merge(data, file_data)
    for k, v in (overrides or {}).items():
        _set_path(merged, k, v)
    cls = type(base)
    return _coerce(cls, merged)


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as YAML (numbers, lists, booleans)."""
    if "=" not in text:
        raise ConfigError(text, f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def dump_config(cfg) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


__all__ = [
    "ConfigError",
    "PreprocessConfig",
    "SynthesisConfig",
    "SegTrainConfig",
    "SemanticConfig",
    "PRESETS",
    "desk_synthesis",
    "full_synthesis",
    "desk_segmentation",
    "full_segmentation",
    "config_to_dict",
    "load_config",
    "parse_override",
    "dump_config",
]
