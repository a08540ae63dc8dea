"""Server side: FedAvg, image reconstruction from restore records, fine-tuning, restore pool."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from . import rng as rngs
from .client import classification_logits
from .masking import RestoreInfo, reconstruct_batch
from .model import Backbone
from .prompts import TransmittedParams, flatten, unflatten
from .wire import read_restore_set, write_restore_set

log = logging.getLogger(__name__)


class AggregationError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def fedavg(params: Sequence[TransmittedParams], sizes: Sequence[int]) -> TransmittedParams:
    """Sample-count weighted coordinate mean.

    Contributions are summed in a canonical order (by size, then by value
    bytes), so the result does not depend on the order clients are listed in.
    """
    if not params:
        raise ProtocolError("fedavg over an empty client list")
    if len(params) != len(sizes):
        raise AggregationError("one size per parameter set required")
    if any(s <= 0 for s in sizes):
        raise AggregationError("aggregation sizes must be positive")
    shapes = params[0].shapes()
    for p in params[1:]:
        if p.shapes() != shapes:
            raise AggregationError(f"shape mismatch in aggregation: {p.shapes()} vs {shapes}")
    dtype = params[0].p_d.dtype
    vecs = [flatten(p).to(torch.float64) for p in params]
    order = sorted(range(len(params)), key=lambda i: (sizes[i], vecs[i].numpy().tobytes()))
    total = float(sum(sizes))
    acc = torch.zeros_like(vecs[0])
    for i in order:
        acc += vecs[i] * (sizes[i] / total)
    return unflatten(acc.to(dtype), params[0])


# ---------------------------------------------------------------------------
# restore pool
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolEntry:
    """Restore sets of one task (client id -> records) and the prompt to decode them with."""

    task: int
    sets: Mapping[int, tuple[RestoreInfo, ...]]
    p_r: torch.Tensor

    @property
    def records(self) -> list[RestoreInfo]:
        return [r for k in sorted(self.sets) for r in self.sets[k]]

    def __len__(self) -> int:
        return sum(len(v) for v in self.sets.values())


@dataclass(frozen=True)
class RestorePool:
    entries: tuple[PoolEntry, ...] = ()

    @property
    def tasks(self) -> list[int]:
        return [e.task for e in self.entries]

    def total_records(self) -> int:
        return sum(len(e) for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def make_entry(task: int, sets: Mapping[int, Sequence[RestoreInfo]], p_r: torch.Tensor) -> PoolEntry:
    return PoolEntry(task, {int(k): tuple(v) for k, v in sorted(sets.items())}, p_r.detach().clone())


def pool_merge(
    pool: RestorePool, task: int, task_sets: Mapping[int, Sequence[RestoreInfo]], p_r: torch.Tensor
) -> RestorePool:
    if task in pool.tasks:
        raise ProtocolError(f"task {task} is already in the restore pool")
    return RestorePool(pool.entries + (make_entry(task, task_sets, p_r),))


def save_pool(directory, pool: RestorePool, config) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for e in pool.entries:
        prompt_name = f"task_{e.task:03d}_prompt.ckpt"
        clients = []
        for k in sorted(e.sets):
            write_restore_set(directory / f"task_{e.task:03d}_client_{k:03d}.rset", e.sets[k])
            clients.append(k)
        checkpoint.save(directory / prompt_name, {"p_r": e.p_r.cpu().numpy()}, config, {"task": e.task})
        index.append({"task": e.task, "clients": clients, "prompt": prompt_name})
    (directory / "pool.json").write_text(json.dumps({"entries": index}, indent=2))
    return directory


def load_pool(directory, dtype: torch.dtype = torch.float32) -> RestorePool:
    directory = Path(directory)
    index = json.loads((directory / "pool.json").read_text())
    entries = []
    for item in index["entries"]:
        t = item["task"]
        sets = {k: read_restore_set(directory / f"task_{t:03d}_client_{k:03d}.rset") for k in item["clients"]}
        arrays, _, _ = checkpoint.load(directory / item["prompt"])
        entries.append(make_entry(t, sets, torch.from_numpy(arrays["p_r"]).to(dtype)))
    return RestorePool(tuple(entries))


# ---------------------------------------------------------------------------
# reconstruction + fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class GlobalReconstructedDataset:
    images: torch.Tensor
    labels: torch.Tensor
    tasks: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def reconstruct_dataset(
    source: Union[RestorePool, PoolEntry],
    backbone: Backbone,
    use_recon_prompt: bool = True,
    chunk: int = 128,
) -> GlobalReconstructedDataset:
    """Decode every record with the prompt stored alongside it.

    A :class:`PoolEntry` is the mid-task source (current round's sets and
    aggregated prompt); a :class:`RestorePool` decodes each task's records
    with that task's archived prompt.
    """
    entries = source.entries if isinstance(source, RestorePool) else (source,)
    if not entries or all(len(e) == 0 for e in entries):
        raise ProtocolError("nothing to reconstruct")
    images, labels, tasks = [], [], []
    with torch.no_grad():
        for e in entries:
            recs = e.records
            p_r = e.p_r.to(backbone.dtype) if use_recon_prompt else None
            for s in range(0, len(recs), chunk):
                x, y = reconstruct_batch(recs[s : s + chunk], p_r, backbone.decoder)
                images.append(x)
                labels.append(y)
                tasks.extend([e.task] * len(y))
    return GlobalReconstructedDataset(torch.cat(images), torch.cat(labels), tasks)


@dataclass(frozen=True)
class ServerSettings:
    epochs: int = 5
    lr: float = 1e-3
    full_batch_max: int = 256
    batch_size: int = 128


def server_finetune(
    w: TransmittedParams,
    data: Optional[GlobalReconstructedDataset],
    backbone: Backbone,
    settings: ServerSettings = ServerSettings(),
    seed: int = 0,
    round_index: int = 0,
) -> tuple[TransmittedParams, list[float]]:
    """Cross-entropy fine-tuning of ``p_d`` and the classifier on reconstructed images.

    ``p_r`` is passed through untouched. Returns the new params and the mean
    loss of each epoch.
    """
    if data is None or len(data) == 0:
        log.warning("server fine-tuning skipped: empty reconstructed dataset")
        return w, []
    p_d = w.p_d.detach().clone().requires_grad_(True)
    weight = w.weight.detach().clone().requires_grad_(True)
    bias = w.bias.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([p_d, weight, bias], lr=settings.lr)
    probe = TransmittedParams(p_d, weight, bias, w.p_r)
    n = len(data)
    bs = n if n <= settings.full_batch_max else settings.batch_size
    shuffle = rngs.stream(seed, rngs.SERVER_SHUFFLE, round_index)
    images = data.images.to(backbone.dtype)
    losses = []
    for _ in range(settings.epochs):
        order = np.arange(n) if bs >= n else shuffle.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = torch.from_numpy(order[s : s + bs])
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(
                classification_logits(backbone, images[idx], probe), data.labels[idx], reduction="sum"
            )
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total / n)
    return replace(w, p_d=p_d.detach(), weight=weight.detach(), bias=bias.detach()), losses


def server_ce(w: TransmittedParams, data: GlobalReconstructedDataset, backbone: Backbone) -> float:
    """Mean cross-entropy of ``w`` on a reconstructed dataset (no update)."""
    with torch.no_grad():
        logits = classification_logits(backbone, data.images.to(backbone.dtype), w)
        return F.cross_entropy(logits, data.labels).item()
