"""Model/training/inference configuration and the flat key=value run config.

The run config file is a plain text file of ``key=value`` lines with ``#``
comments. Unknown keys are rejected, every value is validated up front, and
the fully-resolved config can be echoed back out in a stable format that
parses to the same config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError

FEATURE_LEVELS = 3          # pyramid strides 32, 16, 8 (coarse to fine)
LEVEL_STRIDES = (32, 16, 8)
BACKBONE_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    transformers: int = 1
    layers_per_level: int = 3
    num_queries: int = 100
    embed_dim: int = 256
    ffn_dim: int = 2048
    heads: int = 8
    k_plant: int = 3
    k_leaf: int = 1
    mask_stride: int = 4
    backbone_widths: tuple[int, ...] = (16, 32, 64, 128)

    @property
    def decoder_layers(self) -> int:
        """Total layers in one transformer decoder."""
        return FEATURE_LEVELS * self.layers_per_level

    def validate(self) -> None:
        if self.transformers not in (1, 2):
            raise ConfigError(f"transformers must be 1 or 2, got {self.transformers}")
        if self.layers_per_level not in (1, 3):
            raise ConfigError(f"layers_per_level must be 1 or 3, got {self.layers_per_level}")
        if self.num_queries < 1:
            raise ConfigError("num_queries must be positive")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4 != 0:
            raise ConfigError("embed_dim must be a multiple of 4 (2-D sinusoidal encoding)")
        if self.mask_stride not in (1, 2, 4, 8):
            raise ConfigError(f"mask_stride must be one of 1/2/4/8, got {self.mask_stride}")
        if self.k_plant < 1 or self.k_leaf < 1:
            raise ConfigError("class counts must be positive")
        if len(self.backbone_widths) != 4 or any(w < 1 for w in self.backbone_widths):
            raise ConfigError("backbone_widths must be 4 positive integers")

    @property
    def variant_name(self) -> str:
        """Shorthand used in logs, e.g. (2T, 9L)."""
        return f"({self.transformers}T, {self.decoder_layers}L)"


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    backbone_lr_mult: float = 0.1
    decay_fractions: tuple[float, ...] = (0.9, 0.95)
    decay_factor: float = 0.1
    epochs: int = 100
    freeze_stages: int = 4
    seed: int = 0
    grad_clip_norm: float = 0.0

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        fr = self.decay_fractions
        if any(not (0.0 < f <= 1.0) for f in fr) or any(a >= b for a, b in zip(fr, fr[1:])):
            raise ConfigError("decay_fractions must be strictly increasing in (0, 1]")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.freeze_stages <= 5:
            raise ConfigError("freeze_stages must be in 0..5")
        if self.grad_clip_norm < 0:
            raise ConfigError("grad_clip_norm must be >= 0 (0 disables)")


@dataclass(frozen=True)
class InferenceConfig:
    mask_confidence_threshold: float = 0.5
    overlap_threshold: float = 0.8

    def validate(self) -> None:
        for name in ("mask_confidence_threshold", "overlap_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_mask: float = 2.5

    def validate(self) -> None:
        if self.lambda_cls < 0 or self.lambda_mask < 0:
            raise ConfigError("loss weights must be >= 0")


_INT_TUPLE_KEYS = {"backbone_widths"}
_FLOAT_TUPLE_KEYS = {"decay_fractions"}


@dataclass(frozen=True)
class RunConfig:
    """Union of all configurable knobs, as read from a key=value file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.inference.validate()
        self.loss.validate()
        return self

    def echo(self) -> str:
        """Stable textual form; parses back to an identical config."""
        lines = []
        for section in (self.model, self.train, self.inference, self.loss):
            for f in fields(section):
                v = getattr(section, f.name)
                if isinstance(v, tuple):
                    v = ",".join(_fmt_scalar(x) for x in v)
                else:
                    v = _fmt_scalar(v)
                lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def replace(self, **overrides) -> "RunConfig":
        merged = dict(_as_flat(self))
        merged.update(overrides)
        return _from_flat(merged)


def _fmt_scalar(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _as_flat(cfg: RunConfig) -> dict:
    out = {}
    for section in (cfg.model, cfg.train, cfg.inference, cfg.loss):
        for f in fields(section):
            out[f.name] = getattr(section, f.name)
    return out


def _field_specs():
    specs = {}
    for cls, attr in ((ModelConfig, "model"), (TrainConfig, "train"),
                      (InferenceConfig, "inference"), (LossWeights, "loss")):
        for f in fields(cls):
            specs[f.name] = (cls, attr, f.type)
    return specs


_SPECS = _field_specs()


def _convert(key: str, raw) -> object:
    if key in _INT_TUPLE_KEYS or key in _FLOAT_TUPLE_KEYS:
        if isinstance(raw, tuple):
            parts = [str(x) for x in raw]
        else:
            parts = [p.strip() for p in str(raw).split(",") if p.strip()]
        try:
            if key in _INT_TUPLE_KEYS:
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"bad list value for '{key}': {raw!r}") from exc
    cls, _, ftype = _SPECS[key]
    default = getattr(cls(), key)
    try:
        if isinstance(default, bool):
            return str(raw).lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(str(raw))
        if isinstance(default, float):
            return float(str(raw))
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from exc
    return raw


def _from_flat(values: dict) -> RunConfig:
    groups: dict[str, dict] = {"model": {}, "train": {}, "inference": {}, "loss": {}}
    for key, raw in values.items():
        if key not in _SPECS:
            raise ConfigError(f"unknown config key '{key}'")
        _, attr, _ = _SPECS[key]
        groups[attr][key] = _convert(key, raw)
    cfg = RunConfig(
        model=ModelConfig(**groups["model"]),
        train=TrainConfig(**groups["train"]),
        inference=InferenceConfig(**groups["inference"]),
        loss=LossWeights(**groups["loss"]),
    )
    return cfg.validate()


def parse_config_text(text: str) -> RunConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = raw.strip()
    return _from_flat(values)


def parse_config(path) -> RunConfig:
    """Read and validate a run config file; absent keys take defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
