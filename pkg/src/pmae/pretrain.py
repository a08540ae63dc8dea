"""Decoder pre-training by masked reconstruction behind a frozen encoder."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import rng as rngs
from .client import reconstruction_terms
from .config import ConfigError
from .masking import make_mask_plans
from .model import Backbone

log = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    backbone: Backbone
    heldout_mse: list[float] = field(default_factory=list)  # index 0 = before training
    train_loss: list[float] = field(default_factory=list)


def heldout_mse(backbone: Backbone, images: torch.Tensor, seed: int = 0, loss_pixels: str = "all") -> float:
    """Mean reconstruction MSE (unprompted decoder) under a fixed set of mask plans."""
    cfg = backbone.config
    plans = make_mask_plans(images.shape[0], cfg.num_patches, cfg.mask_ratio, rngs.stream(seed, rngs.PRETRAIN, 999))
    with torch.no_grad():
        return reconstruction_terms(backbone, images.to(backbone.dtype), plans, None, loss_pixels).mean().item()


def pretrain_decoder(
    backbone: Backbone,
    train_images: torch.Tensor,
    heldout_images: torch.Tensor,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    loss_pixels: str = "all",
) -> PretrainResult:
    """Train a copy of the decoder; the encoder (and the input backbone) stay untouched."""
    cfg = backbone.config
    if tuple(train_images.shape[1:]) != (cfg.channels, cfg.image_side, cfg.image_side):
        raise ConfigError(f"corpus images {tuple(train_images.shape[1:])} do not match model config")
    model = copy.deepcopy(backbone)
    params = model.decoder_parameters()
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    x_train = train_images.to(model.dtype)
    x_held = heldout_images.to(model.dtype)
    result = PretrainResult(model, [heldout_mse(model, x_held, seed, loss_pixels)])
    shuffle = rngs.stream(seed, rngs.PRETRAIN, 0)
    mask_rng = rngs.stream(seed, rngs.PRETRAIN, 1)
    n = x_train.shape[0]
    for epoch in range(epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = torch.from_numpy(order[s : s + batch_size])
            plans = make_mask_plans(len(idx), cfg.num_patches, cfg.mask_ratio, mask_rng)
            opt.zero_grad(set_to_none=True)
            loss = reconstruction_terms(model, x_train[idx], plans, None, loss_pixels).mean()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        result.train_loss.append(total / n)
        result.heldout_mse.append(heldout_mse(model, x_held, seed, loss_pixels))
        log.info("decoder epoch %d: train %.5f held-out %.5f", epoch + 1, result.train_loss[-1], result.heldout_mse[-1])
    model.freeze()
    return result


def summarize_curve(curve) -> dict:
    arr = np.asarray(curve, dtype=float)
    return {"initial": float(arr[0]), "final": float(arr[-1]), "ratio": float(arr[-1] / arr[0])}
