"""Key-value run configuration.

File format: one ``key = value`` per line, ``#`` comments.  Values are parsed
as JSON when possible (numbers, lists, booleans), otherwise kept as strings.
Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

ENV_SEED = "TREEREG_SEED"
ENV_PROFILE = "TREEREG_PROFILE"


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    depths_used: list = field(default_factory=lambda: [5, 4, 3])
    channel_widths: list = field(default_factory=lambda: [32, 64, 128])
    voxel_width: int = 256
    output_cols: int = 512
    lift_width: int = 32
    norm_mode: str = "batch"

    def __post_init__(self):
        if list(self.depths_used) != sorted(self.depths_used, reverse=True):
            raise ConfigError("depths_used must run fine to coarse")
        if any(b != a - 1 for a, b in zip(self.depths_used, self.depths_used[1:])):
            raise ConfigError("depths_used must be consecutive")
        if self.depths_used[-1] != 3:
            raise ConfigError("the last encoded depth must be 3 so pooling lands on the 4^3 voxel level")
        if len(self.channel_widths) != len(self.depths_used):
            raise ConfigError("one channel width per encoded depth")
        widths = list(self.channel_widths) + [self.voxel_width]
        if any(w <= 0 for w in widths) or widths != sorted(widths):
            raise ConfigError("channel widths must be positive and non-decreasing along coarsening")
        if self.lift_width != self.channel_widths[0]:
            raise ConfigError("lift_width must equal the first channel width")
        if self.norm_mode not in ("batch", "none"):
            raise ConfigError("norm_mode must be 'batch' or 'none'")

    @property
    def output_rows(self) -> int:
        return 64


@dataclass
class TransformerConfig:
    model_dim: int = 512
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    feedforward_dim: int = 1024

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")


@dataclass
class RunConfig:
    # model
    max_depth: int = 6
    depths_used: list = field(default_factory=lambda: [5, 4, 3])
    channel_widths: list = field(default_factory=lambda: [32, 64, 128])
    voxel_width: int = 256
    output_cols: int = 512
    lift_width: int = 32
    norm_mode: str = "batch"
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    feedforward_dim: int = 1024
    logit_scale: float = 1.0
    # training
    learning_rate: float = 1e-3
    epochs: int = 50
    batch: int = 4
    k0: int = 3
    pass_index_start: int = 0
    grad_clip: float = 5.0
    seed: int = 0
    profile: str = "float64"
    threads: int = 0
    # data
    train_count: int = 256
    val_count: int = 64
    max_angle: float = 30.0
    max_translation: float = 0.3
    noise_share: float = 0.5
    noise_level: float = 0.05
    resample_pairs: bool = True
    augment_rotation: bool = False

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            list(self.depths_used), list(self.channel_widths), self.voxel_width, self.output_cols, self.lift_width, self.norm_mode
        )

    def transformer(self) -> TransformerConfig:
        return TransformerConfig(self.output_cols, self.heads, self.encoder_layers, self.decoder_layers, self.feedforward_dim)

    def validate(self) -> "RunConfig":
        self.encoder()
        self.transformer()
        if self.profile not in ("float64", "float32"):
            raise ConfigError("profile must be float64 or float32")
        if self.k0 < 1 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("k0 and batch must be >= 1, epochs >= 0")
        if self.pass_index_start not in (0, 1):
            raise ConfigError("pass_index_start must be 0 or 1")
        if self.max_depth > 10 or max(self.depths_used) > self.max_depth:
            raise ConfigError("max_depth must cover the encoded depths")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**dict(values)).validate()

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Read ``path`` (optional), apply environment then explicit overrides."""
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    if ENV_SEED in os.environ:
        values["seed"] = int(os.environ[ENV_SEED])
    if ENV_PROFILE in os.environ:
        values["profile"] = os.environ[ENV_PROFILE]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(values)
