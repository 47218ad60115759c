"""Model and training configuration, stored as line-based ``key = value`` text."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .errors import ConfigError

CHOICES = {
    "image_encoder": ("vit", "vitmae"),
    "cross_attention": ("before", "interleaved"),
    "loss_scope": ("full", "masked"),
    "variant": ("l2sq", "l1"),
    "precision": ("standard", "wide"),
}


@dataclass
class ModelConfig:
    token_size: int = 128          # C
    num_groups: int = 64           # G, a perfect square
    group_size: int = 16           # M
    mask_ratio: float = 2 / 3
    encoder_depth: int = 6
    image_depth: int = 4
    decoder_depth: int = 4
    heads: int = 8
    image_size: int = 64           # H == W
    image_encoder: str = "vit"
    patch_dropout: float = 0.0
    cross_attention: str = "before"
    loss_scope: str = "full"
    variant: str = "l2sq"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    epochs: int = 200
    checkpoint_every: int = 50
    seed: int = 0
    precision: str = "standard"
    fps_start: int = 0
    init_linear: str = "uniform_inv_sqrt_fan_in"
    init_embedding_std: float = 0.02

    def __post_init__(self):
        self.validate()

    @property
    def grid(self):
        return math.isqrt(self.num_groups)

    @property
    def patch_size(self):
        return self.image_size // self.grid

    def validate(self):
        g = self.num_groups
        if g < 1 or math.isqrt(g) ** 2 != g:
            squares = [k * k for k in range(max(1, math.isqrt(g) - 1), math.isqrt(g) + 3)]
            raise ConfigError(f"num_groups={g} is not a perfect square (nearby options: {squares})")
        if self.image_size % self.grid:
            valid = [h for h in range(self.grid, 4 * self.image_size + 1, self.grid)
                     if abs(h - self.image_size) <= 2 * self.grid]
            raise ConfigError(f"image_size={self.image_size} is not divisible by sqrt(num_groups)={self.grid}; "
                              f"valid sizes nearby: {valid}")
        if self.token_size % self.heads:
            raise ConfigError(f"token_size={self.token_size} is not divisible by heads={self.heads}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio={self.mask_ratio} outside [0, 1)")
        if not 0.0 <= self.patch_dropout < 1.0:
            raise ConfigError(f"patch_dropout={self.patch_dropout} outside [0, 1)")
        for key in ("token_size", "group_size", "heads", "batch_size", "checkpoint_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        for key in ("encoder_depth", "image_depth", "decoder_depth", "epochs"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key, options in CHOICES.items():
            if getattr(self, key) not in options:
                raise ConfigError(f"{key}={getattr(self, key)!r}; expected one of {options}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {repr(value) if isinstance(value, float) else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        return (base or cls()).replace(**parse_overrides(text))

    @classmethod
    def from_file(cls, path, base=None):
        return cls.from_text(Path(path).read_text(), base)

    def architecture(self):
        """Fields that determine parameter shapes."""
        keys = ("token_size", "num_groups", "group_size", "encoder_depth", "image_depth",
                "decoder_depth", "heads", "image_size", "cross_attention")
        return {k: getattr(self, k) for k in keys}


_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _convert(key, raw):
    kind = type(getattr(ModelConfig(), key))
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(Fraction(raw)) if "/" in raw else float(raw)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_overrides(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return values


def parse_assignment(item):
    """Parse one ``key=value`` command-line override."""
    if "=" not in item:
        raise ConfigError(f"expected KEY=VALUE, got {item!r}")
    key, raw = (s.strip() for s in item.split("=", 1))
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return {key: _convert(key, raw)}


PRESETS = ("tiny", "base", "vitmae", "large", "upsample")


def preset_path(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return resources.files("pointfill") / "configs" / f"{name}.cfg"


def load_preset(name) -> ModelConfig:
    return ModelConfig.from_text(preset_path(name).read_text())


def resolve_config(source=None, overrides=None, base=None) -> ModelConfig:
    """defaults < ``base`` < file or preset ``source`` < ``overrides``."""
    cfg = base or ModelConfig()
    if source:
        if source in PRESETS:
            text = preset_path(source).read_text()
        else:
            path = Path(source)
            if not path.is_file():
                raise ConfigError(f"config file not found: {source} (presets: {', '.join(PRESETS)})")
            text = path.read_text()
        cfg = ModelConfig.from_text(text, cfg)
    if overrides:
        cfg = cfg.replace(**overrides)
    return cfg
