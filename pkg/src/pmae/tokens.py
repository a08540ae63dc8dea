"""Containers shared by the model and the masking codec."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class TokenSequence:
    """Batched tokens ``(B, L, D)`` with the patch index of every slot ``(B, L)``."""

    tokens: torch.Tensor
    positions: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() != 3:
            raise ValueError(f"tokens must be (B, L, D), got {tuple(self.tokens.shape)}")
        if self.tokens.shape[1] < 1:
            raise ValueError("token sequence is empty")
        if tuple(self.positions.shape) != tuple(self.tokens.shape[:2]):
            raise ValueError("positions must be (B, L) matching tokens")

    def __len__(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]

    def pooled(self) -> torch.Tensor:
        # no class token: classification reads the mean patch feature
        return self.tokens.mean(dim=1)


@dataclass(frozen=True)
class MaskPlan:
    """A random patch order; the first ``visible_count`` entries stay visible."""

    permutation: np.ndarray
    visible_count: int

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        object.__setattr__(self, "permutation", perm)
        n = perm.shape[0]
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise ValueError("permutation must be a bijection on 0..N-1")
        if not 1 <= self.visible_count <= n:
            raise ValueError(f"visible_count {self.visible_count} outside [1, {n}]")

    @property
    def num_patches(self) -> int:
        return self.permutation.shape[0]

    @property
    def visible(self) -> np.ndarray:
        return self.permutation[: self.visible_count]

    @property
    def masked(self) -> np.ndarray:
        return self.permutation[self.visible_count :]

    @property
    def restore_ids(self) -> np.ndarray:
        return np.argsort(self.permutation, kind="stable")


def stack_visible(plans) -> torch.Tensor:
    """Visible patch indices of a list of plans as a ``(B, V)`` long tensor."""
    counts = {p.visible_count for p in plans}
    if len(counts) != 1:
        raise ValueError("plans in one batch must share visible_count")
    return torch.from_numpy(np.stack([p.visible for p in plans]))
