"""The tunable payload exchanged between clients and the server."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import checkpoint
from .config import ConfigError, ModelConfig

PROMPT_INIT = 0.03
FIELDS = ("p_d", "weight", "bias", "p_r")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TransmittedParams:
    """Discriminative prompt, classifier and reconstructive prompt.

    ``p_d`` is ``(prompt_blocks, d_prompt_len, embed_dim)``, one segment per
    prompted encoder block; ``weight``/``bias`` are the classifier over the
    classes seen so far; ``p_r`` is ``(r_prompt_len, decoder_dim)``.
    Instances are treated as immutable snapshots.
    """

    p_d: torch.Tensor
    weight: torch.Tensor
    bias: torch.Tensor
    p_r: torch.Tensor

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {f: getattr(self, f) for f in FIELDS}

    def shapes(self) -> dict[str, tuple]:
        return {f: tuple(t.shape) for f, t in self.tensors().items()}

    def clone(self) -> "TransmittedParams":
        return TransmittedParams(**{f: t.detach().clone() for f, t in self.tensors().items()})

    def __add__(self, other: "TransmittedParams") -> "TransmittedParams":
        _check_compatible(self, other)
        return TransmittedParams(**{f: getattr(self, f) + getattr(other, f) for f in FIELDS})

    def __mul__(self, scalar: float) -> "TransmittedParams":
        return TransmittedParams(**{f: getattr(self, f) * scalar for f in FIELDS})

    __rmul__ = __mul__

    def checksum(self, field: str | None = None) -> str:
        h = hashlib.sha256()
        for f in [field] if field else FIELDS:
            h.update(getattr(self, f).detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def check(self, config: ModelConfig) -> None:
        expect = {
            "p_d": (config.prompt_blocks, config.d_prompt_len, config.embed_dim),
            "weight": (self.num_classes, config.embed_dim),
            "bias": (self.num_classes,),
            "p_r": (config.r_prompt_len, config.decoder_dim),
        }
        if self.shapes() != expect:
            raise ShapeError(f"parameter shapes {self.shapes()} do not match config {expect}")


def _check_compatible(a: TransmittedParams, b: TransmittedParams) -> None:
    if a.shapes() != b.shapes():
        raise ShapeError(f"incompatible parameter shapes {a.shapes()} vs {b.shapes()}")


def init_params(
    config: ModelConfig,
    num_classes: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> TransmittedParams:
    if num_classes < 1:
        raise ConfigError("classifier needs at least one class")
    p_d = rng.uniform(-PROMPT_INIT, PROMPT_INIT, (config.prompt_blocks, config.d_prompt_len, config.embed_dim))
    p_r = rng.uniform(-PROMPT_INIT, PROMPT_INIT, (config.r_prompt_len, config.decoder_dim))
    return TransmittedParams(
        p_d=torch.from_numpy(p_d).to(dtype),
        weight=torch.zeros(num_classes, config.embed_dim, dtype=dtype),
        bias=torch.zeros(num_classes, dtype=dtype),
        p_r=torch.from_numpy(p_r).to(dtype),
    )


def flatten(w: TransmittedParams) -> torch.Tensor:
    return torch.cat([getattr(w, f).reshape(-1) for f in FIELDS])


def unflatten(vec: torch.Tensor, template: TransmittedParams) -> TransmittedParams:
    sizes = [getattr(template, f).numel() for f in FIELDS]
    if vec.dim() != 1 or vec.numel() != sum(sizes):
        raise ShapeError(f"vector of length {vec.numel()} does not fit template ({sum(sizes)})")
    parts = torch.split(vec, sizes)
    return TransmittedParams(
        **{f: p.reshape(getattr(template, f).shape).clone() for f, p in zip(FIELDS, parts)}
    )


def expand_classifier(w: TransmittedParams, new_classes: int) -> TransmittedParams:
    """Append zero rows for ``new_classes`` classes; existing rows are kept as is."""
    if new_classes < 1:
        raise ConfigError("expand_classifier needs new_classes >= 1")
    d = w.weight.shape[1]
    weight = torch.cat([w.weight, w.weight.new_zeros(new_classes, d)])
    bias = torch.cat([w.bias, w.bias.new_zeros(new_classes)])
    return replace(w, weight=weight, bias=bias)


def save_params(path, w: TransmittedParams, config: ModelConfig, round: int, task: int):
    arrays = {f: t.detach().cpu().numpy() for f, t in w.tensors().items()}
    return checkpoint.save(path, arrays, config, {"kind": "transmitted", "round": round, "task": task})


def load_params(path, dtype: torch.dtype = torch.float32) -> tuple[TransmittedParams, dict]:
    arrays, _, meta = checkpoint.load(path)
    missing = set(FIELDS) - set(arrays)
    if missing:
        raise checkpoint.CheckpointError(f"parameter file lacks {sorted(missing)}")
    w = TransmittedParams(**{f: torch.from_numpy(arrays[f]).to(dtype) for f in FIELDS})
    return w, meta
