"""Pipeline configuration: a flat key=value file, overridable per flag.

Every tunable of the pipeline lives here, including one named seed per
random process, so a config plus the seeds fully determines every output
byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(Exception):
    """Bad key, bad value, or violated config invariant."""


@dataclass
class PipelineConfig:
    # geometry
    image_size: int = 64
    stages: int = 3
    alpha: float = 0.5
    # codebook
    codebook_size: int = 64
    latent_channels: int = 32
    # encoder
    encoder_channels: tuple = (32, 64, 128)
    encoder_steps: int = 600
    encoder_batch: int = 8
    encoder_lr: float = 3e-4
    # vq training
    vq_steps: int = 1500
    vq_batch: int = 16
    vq_lr: float = 3e-4
    # transformer
    tf_dim: int = 128
    tf_layers: int = 4
    tf_heads: int = 4
    tf_steps: int = 2000
    tf_batch: int = 8
    tf_lr: float = 3e-4
    # decoder
    decoder_steps: int = 900
    decoder_batch: int = 8
    decoder_lr: float = 1e-4
    r1_weight: float = 0.1
    perceptual_weight: float = 0.1
    # sampler defaults
    sampler_steps: int = 5
    temperature: float = 1.0
    anneal: float = 0.9
    # dataset
    dataset_kind: str = "mixed"
    dataset_count: int = 500
    # evaluation
    eval_images: int = 64
    eval_samples: int = 8
    # seeds, one per random process
    seed_dataset: int = 101
    seed_masks: int = 202
    seed_vq: int = 303
    seed_encoder: int = 404
    seed_transformer: int = 505
    seed_decoder: int = 606
    seed_eval: int = 707
    # paths
    workdir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % (2**self.stages):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^stages ({2**self.stages})"
            )
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.sampler_steps < 1:
            raise ConfigError(f"sampler_steps must be >= 1, got {self.sampler_steps}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not (0.0 < self.anneal <= 1.0):
            raise ConfigError(f"anneal must be in (0, 1], got {self.anneal}")
        if self.tf_dim % self.tf_heads:
            raise ConfigError(
                f"tf_dim {self.tf_dim} not divisible by tf_heads {self.tf_heads}"
            )

    @property
    def token_extent(self) -> int:
        return self.image_size // (2**self.stages)

    @property
    def grid_len(self) -> int:
        return self.token_extent**2

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, str]) -> "PipelineConfig":
        cfg = parse_config(self.to_text())
        return apply_overrides(cfg, overrides)


def _coerce(name: str, raw: str, like) -> object:
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {name}: {raw!r} ({e})") from None


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, str]) -> PipelineConfig:
    defaults = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for key, raw in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        defaults[key] = _coerce(key, str(raw), defaults[key])
    return PipelineConfig(**defaults)


def parse_config(text: str) -> PipelineConfig:
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        overrides[key] = value
    return apply_overrides(PipelineConfig(), overrides)


def load_config(path: str | Path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
