"""Mask plans, restore information and decoder-side reassembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, ModelConfig, visible_count
from .model import Decoder, Encoder, patch_pixels, unpatchify
from .tokens import MaskPlan, TokenSequence

__all__ = [
    "MaskPlan",
    "RestoreInfo",
    "ReconstructedImage",
    "IntegrityError",
    "make_mask_plan",
    "make_mask_plans",
    "extract_restore",
    "extract_restore_batch",
    "assemble_for_decoder",
    "assemble_tokens",
    "reconstruct",
    "reconstruct_batch",
    "reconstruction_mse",
    "masked_patch_mask",
]


class IntegrityError(ValueError):
    """Restore ids or config stamps that cannot belong to this model."""


@dataclass(frozen=True)
class RestoreInfo:
    """Encoded visible tokens of one image plus what is needed to re-place them."""

    visible_tokens: np.ndarray  # (V, D) float32
    restore_ids: np.ndarray  # (N,) int64, inverse of the plan permutation
    label: int
    config_hash: bytes = b"\x00" * 8

    @property
    def visible_count(self) -> int:
        return self.visible_tokens.shape[0]

    @property
    def num_patches(self) -> int:
        return self.restore_ids.shape[0]

    def permutation(self) -> np.ndarray:
        return np.argsort(self.restore_ids, kind="stable")

    def __eq__(self, other):
        if not isinstance(other, RestoreInfo):
            return NotImplemented
        return (
            self.label == other.label
            and self.config_hash == other.config_hash
            and np.array_equal(self.restore_ids, other.restore_ids)
            and self.visible_tokens.shape == other.visible_tokens.shape
            and self.visible_tokens.tobytes() == other.visible_tokens.tobytes()
        )

    __hash__ = None


@dataclass
class ReconstructedImage:
    pixels: torch.Tensor  # (C, H, W)
    label: int


def make_mask_plan(n: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    if n < 1:
        raise ConfigError("need at least one patch")
    v = visible_count(n, mask_ratio)
    if v < 1:
        raise ConfigError(f"mask_ratio {mask_ratio} leaves no visible patch out of {n}")
    return MaskPlan(rng.permutation(n), v)


def make_mask_plans(batch: int, n: int, mask_ratio: float, rng: np.random.Generator) -> list[MaskPlan]:
    return [make_mask_plan(n, mask_ratio, rng) for _ in range(batch)]


def extract_restore_batch(
    images: torch.Tensor,
    labels: Sequence[int],
    encoder: Encoder,
    plans: Sequence[MaskPlan],
) -> list[RestoreInfo]:
    """Encode masked images with the plain (unprompted) encoder."""
    cfg = encoder.config
    with torch.no_grad():
        seq = encoder(images.to(encoder.patch_embed.weight.dtype), mask_plan=plans)
    toks = seq.tokens.detach().cpu().numpy().astype(np.float32)
    stamp = cfg.config_hash()
    return [
        RestoreInfo(toks[i], plans[i].restore_ids.copy(), int(labels[i]), stamp) for i in range(len(plans))
    ]


def extract_restore(image: torch.Tensor, label: int, encoder: Encoder, plan: MaskPlan) -> RestoreInfo:
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return extract_restore_batch(image, [label], encoder, [plan])[0]


def _check_restore_ids(ids: np.ndarray, n: int) -> None:
    if ids.shape != (n,) or not np.array_equal(np.sort(ids), np.arange(n)):
        raise IntegrityError(f"restore ids are not a permutation of 0..{n - 1}")


def assemble_tokens(
    visible: torch.Tensor,
    restore_ids: torch.Tensor,
    mask_token: torch.Tensor,
    embed: Optional[torch.nn.Module] = None,
) -> TokenSequence:
    """Tensor-level reassembly: ``visible (B, V, D)``, ``restore_ids (B, N)``."""
    if embed is not None:
        visible = embed(visible)
    if visible.shape[-1] != mask_token.shape[-1]:
        raise ConfigError(
            f"visible token width {visible.shape[-1]} != mask token width {mask_token.shape[-1]}"
        )
    b, v, d = visible.shape
    n = restore_ids.shape[1]
    filler = mask_token.reshape(1, 1, d).expand(b, n - v, d)
    x = torch.cat([visible, filler], dim=1)
    x = torch.gather(x, 1, restore_ids.unsqueeze(-1).expand(-1, -1, d))
    return TokenSequence(x, torch.arange(n).expand(b, n))


def assemble_for_decoder(
    records: RestoreInfo | Sequence[RestoreInfo],
    mask_token: torch.Tensor,
    embed: Optional[torch.nn.Module] = None,
    num_patches: Optional[int] = None,
) -> TokenSequence:
    """Scatter (projected) visible tokens back to their patch slots; fill the rest with the mask token."""
    if isinstance(records, RestoreInfo):
        records = [records]
    n = num_patches if num_patches is not None else records[0].num_patches
    for r in records:
        _check_restore_ids(r.restore_ids, n)
    vis = torch.from_numpy(np.stack([r.visible_tokens for r in records])).to(mask_token.dtype)
    ids = torch.from_numpy(np.stack([r.restore_ids for r in records]))
    return assemble_tokens(vis, ids, mask_token, embed)


def reconstruct_batch(
    records: Sequence[RestoreInfo], p_r: Optional[torch.Tensor], decoder: Decoder
) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode records into ``(B, C, H, W)`` images and a label tensor."""
    cfg = decoder.config
    stamp = cfg.config_hash()
    for r in records:
        if r.config_hash != stamp:
            raise IntegrityError("restore record was produced under a different model config")
    seq = assemble_for_decoder(records, decoder.mask_token, decoder.embed, cfg.num_patches)
    pixels = unpatchify(decoder(seq, p_r), cfg)
    labels = torch.tensor([r.label for r in records], dtype=torch.long)
    return pixels, labels


def reconstruct(r: RestoreInfo, p_r: Optional[torch.Tensor], decoder: Decoder) -> ReconstructedImage:
    pixels, _ = reconstruct_batch([r], p_r, decoder)
    return ReconstructedImage(pixels[0], r.label)


def masked_patch_mask(plans: Sequence[MaskPlan]) -> torch.Tensor:
    """``(B, N)`` bool, True where the patch was hidden from the encoder."""
    n = plans[0].num_patches
    m = np.zeros((len(plans), n), dtype=bool)
    for i, p in enumerate(plans):
        m[i, p.masked] = True
    return torch.from_numpy(m)


def reconstruction_mse(
    x_hat: torch.Tensor,
    x: torch.Tensor,
    config: ModelConfig,
    loss_pixels: str = "all",
    masked: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Per-image mean squared error on raw pixels, shape ``(B,)``.

    ``loss_pixels="masked_only"`` restricts the mean to hidden patches and
    needs the ``masked`` patch mask.
    """
    if loss_pixels == "all":
        return ((x_hat - x) ** 2).flatten(1).mean(dim=1)
    if loss_pixels != "masked_only":
        raise ConfigError(f"loss_pixels must be 'all' or 'masked_only', got {loss_pixels!r}")
    if masked is None:
        raise ValueError("masked_only loss needs the masked patch mask")
    err = ((patch_pixels(x_hat, config) - patch_pixels(x, config)) ** 2).mean(dim=-1)
    m = masked.to(err.dtype)
    return (err * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)
