"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.8
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    image_size: int = 64
    embed_dim: int = 64
    encoder_blocks: int = 2
    transformer_blocks: int = 2
    heads: int = 4
    dataset: str = "synth:32:0"
    eval_dataset: str = ""
    depth_scale: float = 10.0
    min_valid: float = 1e-3
    fusion_scaled: bool = False
    precision: str = "float64"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.encoder_blocks < 1 or self.transformer_blocks < 0:
            raise ConfigError("encoder_blocks must be >= 1 and transformer_blocks >= 0")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if self.embed_dim % 2 ** self.encoder_blocks:
            raise ConfigError(f"embed_dim must be divisible by 2^encoder_blocks = {2 ** self.encoder_blocks}")
        if self.image_size % self.divisor:
            raise ConfigError(f"image_size {self.image_size} not divisible by {self.divisor}")
        if self.depth_scale <= 0:
            raise ConfigError("depth_scale must be positive")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")

    @property
    def divisor(self) -> int:
        return 2 ** self.encoder_blocks * 4

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """20 epochs at batch 16, lr 1e-4, as used for the full NYU/KITTI runs."""
        return cls(**{"epochs": 20, "batch_size": 16, "learning_rate": 1e-4, **overrides})

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {repr(value) if isinstance(value, float) else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key], lineno)
        try:
            return cls(**values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_text(text)


def _coerce(key: str, value: str, typ: str, lineno: int):
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {typ}, got {value!r}") from None
    return value
