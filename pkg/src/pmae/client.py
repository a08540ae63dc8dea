"""Client-side local update: joint classification/reconstruction prompt tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rngs
from .masking import (
    MaskPlan,
    RestoreInfo,
    assemble_tokens,
    extract_restore_batch,
    make_mask_plans,
    masked_patch_mask,
    reconstruction_mse,
)
from .model import Backbone, classify, unpatchify
from .prompts import TransmittedParams


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ClientSettings:
    epochs: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    restore_count: int = 4  # u
    loss_pixels: str = "all"
    use_recon_prompt: bool = True


@dataclass
class LocalResult:
    client_id: int
    params: TransmittedParams
    restore_set: list[RestoreInfo]
    num_samples: int
    steps: int
    epoch_losses: list[float] = field(default_factory=list)


def _leaves(w: TransmittedParams) -> TransmittedParams:
    return TransmittedParams(**{f: t.detach().clone().requires_grad_(True) for f, t in w.tensors().items()})


def classification_logits(backbone: Backbone, images: torch.Tensor, w: TransmittedParams) -> torch.Tensor:
    feats = backbone.encoder(images, p_d=w.p_d)
    return classify(feats, w.weight, w.bias)


def reconstruction_terms(
    backbone: Backbone,
    images: torch.Tensor,
    plans: Sequence[MaskPlan],
    p_r: Optional[torch.Tensor],
    loss_pixels: str = "all",
) -> torch.Tensor:
    """Per-image MSE of the masked-encode / prompted-decode path, ``(B,)``."""
    cfg = backbone.config
    with torch.no_grad():
        vis = backbone.encoder(images, mask_plan=plans).tokens
    ids = torch.from_numpy(np.stack([p.restore_ids for p in plans]))
    dec = backbone.decoder
    seq = assemble_tokens(vis, ids, dec.mask_token, dec.embed)
    x_hat = unpatchify(dec(seq, p_r), cfg)
    masked = masked_patch_mask(plans) if loss_pixels == "masked_only" else None
    return reconstruction_mse(x_hat, images, cfg, loss_pixels, masked)


def client_loss(
    backbone: Backbone,
    images: torch.Tensor,
    labels: torch.Tensor,
    w: TransmittedParams,
    plans: Sequence[MaskPlan],
    loss_pixels: str = "all",
    use_recon_prompt: bool = True,
    reconstruction: bool = True,
) -> torch.Tensor:
    """Summed cross-entropy plus summed per-image reconstruction MSE over the batch."""
    if images.shape[0] == 0:
        raise DataError("empty batch")
    if labels.min() < 0 or labels.max() >= w.num_classes:
        raise DataError(f"labels outside [0, {w.num_classes})")
    logits = classification_logits(backbone, images, w)
    loss = F.cross_entropy(logits, labels, reduction="sum")
    if reconstruction:
        p_r = w.p_r if use_recon_prompt else None
        loss = loss + reconstruction_terms(backbone, images, plans, p_r, loss_pixels).sum()
    return loss


def client_loss_and_grad(backbone, images, labels, w, plans, **kw) -> tuple[float, TransmittedParams]:
    leaf = _leaves(w)
    loss = client_loss(backbone, images, labels, leaf, plans, **kw)
    grads = torch.autograd.grad(loss, list(leaf.tensors().values()), allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(leaf.tensors().values(), grads)]
    return loss.item(), TransmittedParams(*grads)


def local_update(
    task: int,
    client_id: int,
    w: TransmittedParams,
    images: torch.Tensor,
    labels: torch.Tensor,
    backbone: Backbone,
    settings: ClientSettings,
    seed: int,
    round_index: int,
) -> Optional[LocalResult]:
    """E epochs of Adam on the client slice, then ``u`` restore records.

    Returns ``None`` when the client holds no data for this task.
    ``round_index`` is the global round counter used to key random streams.
    """
    n = images.shape[0]
    if n == 0:
        return None
    cfg = backbone.config
    images = images.to(backbone.dtype)
    leaf = _leaves(w)
    trainable = [leaf.p_d, leaf.weight, leaf.bias]
    if settings.use_recon_prompt:
        trainable.append(leaf.p_r)
    # fresh moments per broadcast
    opt = torch.optim.Adam(trainable, lr=settings.lr)
    shuffle_rng = rngs.stream(seed, rngs.SHUFFLE, round_index, client_id)
    mask_rng = rngs.stream(seed, rngs.TRAIN_MASK, round_index, client_id)
    bs = settings.batch_size
    steps = 0
    epoch_losses = []
    for _ in range(settings.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = torch.from_numpy(order[start : start + bs])
            xb, yb = images[idx], labels[idx]
            plans = make_mask_plans(len(idx), cfg.num_patches, cfg.mask_ratio, mask_rng)
            opt.zero_grad(set_to_none=True)
            loss = client_loss(
                backbone,
                xb,
                yb,
                leaf,
                plans,
                loss_pixels=settings.loss_pixels,
                # without p_r the reconstruction term has no trainable input
                reconstruction=settings.use_recon_prompt,
            )
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        epoch_losses.append(total / n)
    trained = TransmittedParams(**{f: t.detach().clone() for f, t in leaf.tensors().items()})
    records = extract_restore_set(
        images, labels, backbone, settings.restore_count, seed, round_index, client_id
    )
    return LocalResult(client_id, trained, records, n, steps, epoch_losses)


def extract_restore_set(images, labels, backbone, u, seed, round_index, client_id) -> list[RestoreInfo]:
    """Pick ``u`` images (with replacement only if the slice is smaller) and encode them masked."""
    n = images.shape[0]
    pick_rng = rngs.stream(seed, rngs.RESTORE_PICK, round_index, client_id)
    idx = pick_rng.choice(n, size=u, replace=n < u)
    idx = np.sort(idx) if n >= u else idx
    cfg = backbone.config
    mask_rng = rngs.stream(seed, rngs.RESTORE_MASK, round_index, client_id)
    plans = make_mask_plans(u, cfg.num_patches, cfg.mask_ratio, mask_rng)
    sel = torch.from_numpy(np.asarray(idx))
    return extract_restore_batch(images[sel], labels[sel].tolist(), backbone.encoder, plans)


def expected_steps(n: int, batch_size: int, epochs: int) -> int:
    return math.ceil(n / batch_size) * epochs
