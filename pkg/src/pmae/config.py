"""Model configuration and named presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    """Raised for inconsistent model or experiment configuration."""


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 32
    channels: int = 3
    patch_side: int = 4
    embed_dim: int = 96
    encoder_blocks: int = 6
    decoder_blocks: int = 2
    decoder_dim: int = 48
    heads: int = 4
    mask_ratio: float = 0.75
    mlp_ratio: float = 4.0
    # prompt geometry
    prompt_blocks: int = 5
    d_prompt_len: int = 20
    r_prompt_len: int = 5

    def __post_init__(self):
        if self.image_side <= 0 or self.patch_side <= 0 or self.channels <= 0:
            raise ConfigError("image_side, patch_side and channels must be positive")
        if self.image_side % self.patch_side:
            raise ConfigError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        if self.embed_dim % self.heads or self.decoder_dim % self.heads:
            raise ConfigError("embed_dim and decoder_dim must be divisible by heads")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1]")
        if self.visible_count < 1:
            raise ConfigError(f"mask_ratio {self.mask_ratio} leaves no visible patch")
        if not 0 <= self.prompt_blocks <= self.encoder_blocks:
            raise ConfigError("prompt_blocks must lie in [0, encoder_blocks]")
        if self.decoder_blocks < 1 or self.encoder_blocks < 1:
            raise ConfigError("need at least one encoder and one decoder block")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_side**2 * self.channels

    @property
    def visible_count(self) -> int:
        return visible_count(self.num_patches, self.mask_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> bytes:
        """8-byte digest identifying this geometry; stamped on wire records."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


def visible_count(n: int, mask_ratio: float) -> int:
    return int(round((1.0 - mask_ratio) * n))


PRESETS = {
    # default desk-scale geometry
    "desk": ModelConfig(),
    # geometry used by the benchmark runs; 16 patches keeps a CPU run short
    "bench": ModelConfig(patch_side=8, embed_dim=64, decoder_dim=32),
    # gradient-check scale
    "tiny": ModelConfig(
        image_side=8,
        channels=1,
        patch_side=4,
        embed_dim=16,
        encoder_blocks=2,
        decoder_blocks=1,
        decoder_dim=8,
        heads=2,
        mask_ratio=0.5,
        mlp_ratio=2.0,
        prompt_blocks=2,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
