"""Frozen ViT-style encoder/decoder with prompt-aware self-attention.

All backbone weights are created once (seeded) or loaded from a checkpoint
and then frozen; the only tensors that ever receive gradients are the
prompts and the classifier, which are passed in explicitly.
"""

from __future__ import annotations

import hashlib
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig
from .tokens import MaskPlan, TokenSequence, stack_visible


class UsageError(RuntimeError):
    """Raised when an operation is invoked in an unsupported mode."""


# ---------------------------------------------------------------------------
# patch geometry
# ---------------------------------------------------------------------------


def patch_pixels(images: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """``(B, C, H, W)`` -> ``(B, N, p*p*C)`` in raster patch order."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    b, c, h, w = images.shape
    s, p = config.image_side, config.patch_side
    if (c, h, w) != (config.channels, s, s):
        raise ConfigError(f"image shape {(c, h, w)} does not match config {(config.channels, s, s)}")
    g = s // p
    x = images.reshape(b, c, g, p, g, p)
    x = torch.einsum("nchpwq->nhwpqc", x)
    return x.reshape(b, g * g, p * p * c)


def unpatchify(patches: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Inverse of :func:`patch_pixels`."""
    if patches.dim() == 2:
        patches = patches.unsqueeze(0)
    b, n, d = patches.shape
    if n != config.num_patches or d != config.patch_dim:
        raise ValueError(
            f"expected (B, {config.num_patches}, {config.patch_dim}) patches, got {tuple(patches.shape)}"
        )
    g, p, c = config.grid, config.patch_side, config.channels
    x = patches.reshape(b, g, g, p, p, c)
    x = torch.einsum("nhwpqc->nchpwq", x)
    return x.reshape(b, c, g * p, g * p)


def patchify(
    images: torch.Tensor,
    config: ModelConfig,
    embed: Optional[nn.Linear] = None,
    pos: Optional[torch.Tensor] = None,
) -> TokenSequence:
    """Embed every patch and add its positional encoding.

    With ``embed=None`` and ``pos=None`` the tokens are the raw patch pixels,
    which makes the pixel view testable on its own.
    """
    x = patch_pixels(images, config)
    if embed is not None:
        x = embed(x)
    if pos is not None:
        x = x + pos
    b, n = x.shape[:2]
    positions = torch.arange(n).expand(b, n)
    return TokenSequence(x, positions)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table ``(grid*grid, dim)``; half the width per axis."""
    if dim % 4:
        # fall back to a 1-D table over the raster index
        return _sincos_1d(dim, np.arange(grid * grid, dtype=np.float64))
    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    emb_h = _sincos_1d(dim // 2, gy.reshape(-1))
    emb_w = _sincos_1d(dim // 2, gx.reshape(-1))
    return np.concatenate([emb_h, emb_w], axis=1)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / 10000 ** (np.arange(half, dtype=np.float64) / max(half, 1))
    out = np.einsum("m,d->md", pos, omega)
    emb = np.concatenate([np.sin(out), np.cos(out)], axis=1)
    if emb.shape[1] < dim:
        emb = np.pad(emb, ((0, 0), (0, dim - emb.shape[1])))
    return emb


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class PromptedBlock(nn.Module):
    """Pre-norm transformer block whose attention optionally sees prompt tokens."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def msa(self, h: torch.Tensor, prompt: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Multi-head self-attention over ``[prompt; h]``.

        The prompt is prepended to the query, key and value inputs alike;
        outputs at the prompt positions are dropped so the result keeps the
        length of ``h``.
        """
        b, n, d = h.shape
        if d != self.dim:
            raise ConfigError(f"token width {d} != block width {self.dim}")
        lp = 0
        if prompt is not None:
            if prompt.shape[-1] != self.dim:
                raise ConfigError(f"prompt width {prompt.shape[-1]} != block width {self.dim}")
            if prompt.dim() == 2:
                prompt = prompt.unsqueeze(0).expand(b, -1, -1)
            lp = prompt.shape[1]
            h = torch.cat([prompt.to(h.dtype), h], dim=1)
        qkv = self.qkv(h).reshape(b, lp + n, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, lp + n, d)[:, lp:]
        return self.proj(out)

    def forward(self, x: torch.Tensor, prompt: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.msa(self.norm1(x), prompt)
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


def msa_prompted(block: PromptedBlock, h: TokenSequence, prompt: Optional[torch.Tensor]) -> TokenSequence:
    return TokenSequence(block.msa(h.tokens, prompt), h.positions)


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_pos_embed(d, config.grid)).float(), persistent=True
        )
        self.blocks = nn.ModuleList(
            [PromptedBlock(d, config.heads, config.mlp_ratio) for _ in range(config.encoder_blocks)]
        )
        self.norm = nn.LayerNorm(d)

    def patchify(self, images: torch.Tensor) -> TokenSequence:
        return patchify(images, self.config, self.patch_embed, self.pos_embed)

    def forward(
        self,
        images: torch.Tensor,
        p_d: Optional[torch.Tensor] = None,
        mask_plan: Union[MaskPlan, Sequence[MaskPlan], None] = None,
    ) -> TokenSequence:
        """Classification mode (``p_d``, no mask) or restore mode (mask, no ``p_d``)."""
        if p_d is not None and mask_plan is not None:
            raise UsageError("encoder runs either with a discriminative prompt or with a mask, not both")
        seq = self.patchify(images)
        x, positions = seq.tokens, seq.positions
        if mask_plan is not None:
            plans = [mask_plan] * x.shape[0] if isinstance(mask_plan, MaskPlan) else list(mask_plan)
            if len(plans) != x.shape[0]:
                raise ValueError(f"{len(plans)} mask plans for a batch of {x.shape[0]}")
            if plans[0].num_patches != self.config.num_patches:
                raise ConfigError("mask plan patch count does not match config")
            keep = stack_visible(plans)
            x = torch.gather(x, 1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
            positions = keep
        if p_d is not None and p_d.shape[0] > len(self.blocks):
            raise ConfigError(f"{p_d.shape[0]} prompt segments for {len(self.blocks)} blocks")
        for i, blk in enumerate(self.blocks):
            prompt = p_d[i] if p_d is not None and i < p_d.shape[0] else None
            x = blk(x, prompt)
        return TokenSequence(self.norm(x), positions)


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.decoder_dim
        self.embed = nn.Linear(config.embed_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_pos_embed(d, config.grid)).float(), persistent=True
        )
        self.blocks = nn.ModuleList(
            [PromptedBlock(d, config.heads, config.mlp_ratio) for _ in range(config.decoder_blocks)]
        )
        self.norm = nn.LayerNorm(d)
        self.pred = nn.Linear(d, config.patch_dim)

    def forward(self, seq: TokenSequence, p_r: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Full-length decoder-width tokens -> per-patch pixels ``(B, N, p*p*C)``."""
        if len(seq) != self.config.num_patches:
            raise ValueError(f"decoder expects {self.config.num_patches} tokens, got {len(seq)}")
        x = seq.tokens + self.pos_embed
        for i, blk in enumerate(self.blocks):
            # the reconstructive prompt only enters the first block
            x = blk(x, p_r if i == 0 else None)
        return self.pred(self.norm(x))


def classify(features: TokenSequence, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Linear head on the pooled feature; ``(B, C)`` logits."""
    pooled = features.pooled()
    if pooled.shape[-1] != weight.shape[-1]:
        raise ConfigError(f"feature width {pooled.shape[-1]} != classifier width {weight.shape[-1]}")
    return F.linear(pooled, weight.to(pooled.dtype), bias.to(pooled.dtype))


def predict(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. lowest class on ties
    return logits.argmax(dim=-1)


# ---------------------------------------------------------------------------
# backbone bundle
# ---------------------------------------------------------------------------


class Backbone(nn.Module):
    """Encoder + decoder pair with its config; frozen after construction."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> "Backbone":
        model = cls(config)
        model.reset_parameters(seed)
        model.to(dtype)
        return model.freeze()

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.patch_embed.weight.dtype

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, mod in sorted(self.named_modules(), key=lambda kv: kv[0]):
                if isinstance(mod, nn.Linear):
                    nn.init.xavier_uniform_(mod.weight, generator=g)
                    nn.init.zeros_(mod.bias)
                elif isinstance(mod, nn.LayerNorm):
                    nn.init.ones_(mod.weight)
                    nn.init.zeros_(mod.bias)
            nn.init.normal_(self.decoder.mask_token, std=0.02, generator=g)

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def decoder_parameters(self):
        return list(self.decoder.parameters())

    def checksum(self, part: str = "all") -> str:
        """sha256 over parameter/buffer bytes in name order."""
        state = self.state_dict()
        if part != "all":
            state = {k: v for k, v in state.items() if k.startswith(part + ".")}
        h = hashlib.sha256()
        for name in sorted(state):
            h.update(name.encode())
            h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()
