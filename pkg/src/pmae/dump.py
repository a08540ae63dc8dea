"""Debug panels: masked input, unprompted and prompted reconstruction, ground truth."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .masking import extract_restore_batch, make_mask_plans, reconstruct_batch
from .model import Backbone, patch_pixels, unpatchify


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``(C, H, W)`` float in [0, 1] -> ``(H, W, 3)`` uint8."""
    a = img.detach().cpu().float().clamp(0, 1).numpy()
    if a.shape[0] == 1:
        a = np.repeat(a, 3, axis=0)
    return (np.transpose(a, (1, 2, 0)) * 255.0 + 0.5).astype(np.uint8)


def masked_view(images: torch.Tensor, plans, config, fill: float = 0.5) -> torch.Tensor:
    patches = patch_pixels(images, config).clone()
    for i, p in enumerate(plans):
        patches[i, torch.from_numpy(p.masked)] = fill
    return unpatchify(patches, config)


def reconstruction_panels(
    images: torch.Tensor, backbone: Backbone, p_r: torch.Tensor, rng: np.random.Generator
) -> list[np.ndarray]:
    """One ``(H, 4W, 3)`` strip per image."""
    cfg = backbone.config
    images = images.to(backbone.dtype)
    plans = make_mask_plans(images.shape[0], cfg.num_patches, cfg.mask_ratio, rng)
    recs = extract_restore_batch(images, [0] * len(plans), backbone.encoder, plans)
    with torch.no_grad():
        plain, _ = reconstruct_batch(recs, None, backbone.decoder)
        prompted, _ = reconstruct_batch(recs, p_r.to(backbone.dtype), backbone.decoder)
    masked = masked_view(images, plans, cfg)
    strips = []
    for i in range(images.shape[0]):
        cols = [masked[i], plain[i], prompted[i], images[i]]
        strips.append(np.concatenate([to_uint8(c) for c in cols], axis=1))
    return strips


def write_png(path, array: np.ndarray, scale: int = 4) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(array)
    if scale > 1:
        img = img.resize((array.shape[1] * scale, array.shape[0] * scale), Image.NEAREST)
    img.save(path)
    return path
