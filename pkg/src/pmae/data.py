"""Labeled image corpora: a procedural synthetic generator and an ``.npz`` loader.

The synthetic classes are oriented two-colour gratings with a class-specific
blob; per-sample phase, colour jitter and pixel noise keep them from being
separable by mean colour alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch


@dataclass
class Corpus:
    train_x: torch.Tensor  # (M, C, H, W) float32 in [0, 1]
    train_y: torch.Tensor  # (M,) long
    test_x: torch.Tensor
    test_y: torch.Tensor

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.train_y.tolist()) | set(self.test_y.tolist()))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


def _class_params(rng: np.random.Generator, num_classes: int, palette=(0.1, 0.9)) -> list[dict]:
    lo, hi = palette
    params = []
    for _ in range(num_classes):
        params.append(
            dict(
                bg=rng.uniform(lo, hi, 3),
                fg=rng.uniform(lo, hi, 3),
                theta=rng.uniform(0, np.pi),
                freq=rng.uniform(1.0, 3.5),
                blob=rng.uniform(0.25, 0.75, 2),
                radius=rng.uniform(0.12, 0.3),
                blob_col=rng.uniform(0.0, 1.0, 3),
            )
        )
    return params


def _render(p: dict, side: int, channels: int, rng: np.random.Generator, jitter: float, noise: float):
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    theta = p["theta"] + rng.normal(0, 0.15)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * p["freq"] * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    bg = np.clip(p["bg"] + rng.normal(0, jitter, 3), 0, 1)
    fg = np.clip(p["fg"] + rng.normal(0, jitter, 3), 0, 1)
    img = bg[:, None, None] * (1 - wave) + fg[:, None, None] * wave
    cy, cx = p["blob"] + rng.normal(0, 0.08, 2)
    r = p["radius"] * rng.uniform(0.8, 1.2)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))[None]
    col = np.clip(p["blob_col"] + rng.normal(0, jitter, 3), 0, 1)
    img = img * (1 - blob) + col[:, None, None] * blob
    img = img + rng.normal(0, noise, img.shape)
    img = np.clip(img, 0, 1)
    if channels == 1:
        img = img.mean(axis=0, keepdims=True)
    elif channels != 3:
        raise ValueError("synthetic corpus supports 1 or 3 channels")
    return img.astype(np.float32)


def make_corpus(
    num_classes: int = 10,
    train_per_class: int = 100,
    test_per_class: int = 30,
    image_side: int = 32,
    channels: int = 3,
    seed: int = 0,
    jitter: float = 0.12,
    noise: float = 0.04,
    palette: tuple[float, float] = (0.1, 0.9),
) -> Corpus:
    """Deterministic synthetic corpus; ``seed`` fixes both class prototypes and samples.

    ``palette`` bounds the prototype colours; a narrower or shifted palette
    gives a corpus in a different colour domain.
    """
    rng = np.random.default_rng(seed)
    params = _class_params(rng, num_classes, palette)
    out = {}
    for split, per in (("train", train_per_class), ("test", test_per_class)):
        xs, ys = [], []
        for c, p in enumerate(params):
            for _ in range(per):
                xs.append(_render(p, image_side, channels, rng, jitter, noise))
                ys.append(c)
        x = np.stack(xs) if xs else np.zeros((0, channels, image_side, image_side), np.float32)
        out[split] = (torch.from_numpy(x), torch.tensor(ys, dtype=torch.long))
    return Corpus(*out["train"], *out["test"])


def save_corpus(path, corpus: Corpus) -> Path:
    path = Path(path)
    np.savez_compressed(
        path,
        train_x=corpus.train_x.numpy(),
        train_y=corpus.train_y.numpy(),
        test_x=corpus.test_x.numpy(),
        test_y=corpus.test_y.numpy(),
    )
    return path


def load_corpus(path) -> Corpus:
    """Load ``train_x/train_y/test_x/test_y`` arrays; images NCHW, or NHWC uint8."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in ("train_x", "train_y", "test_x", "test_y")}
    for k in ("train_x", "test_x"):
        x = arrays[k]
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / 255.0
        if x.ndim == 4 and x.shape[-1] in (1, 3) and x.shape[1] not in (1, 3):
            x = np.transpose(x, (0, 3, 1, 2))
        arrays[k] = np.ascontiguousarray(x, dtype=np.float32)
    return Corpus(
        torch.from_numpy(arrays["train_x"]),
        torch.from_numpy(arrays["train_y"].astype(np.int64)),
        torch.from_numpy(arrays["test_x"]),
        torch.from_numpy(arrays["test_y"].astype(np.int64)),
    )
