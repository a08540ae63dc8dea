"""Tensor container used for backbone checkpoints and transmitted parameters.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"PMAECKPT"
    offset 8   uint32    format version (1)
    offset 12  uint64    header length H
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          payload: float32 ('<f4') arrays back to back

The header is ``{"config": {...} | null, "meta": {...}, "tensors": {name:
{"shape": [...], "offset": o, "nbytes": n}}}`` with offsets relative to the
payload start. ``config`` is a :class:`ModelConfig` dict.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from .config import ModelConfig

MAGIC = b"PMAECKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def dumps(
    tensors: Mapping[str, np.ndarray],
    config: Optional[ModelConfig] = None,
    meta: Optional[dict] = None,
) -> bytes:
    entries, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": config.to_dict() if config is not None else None,
        "meta": meta or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], Optional[ModelConfig], dict]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(blob[start : start + hlen].decode())
    base = start + hlen
    tensors = {}
    for name, e in header["tensors"].items():
        lo, hi = base + e["offset"], base + e["offset"] + e["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"tensor {name!r} runs past end of file")
        tensors[name] = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(e["shape"]).copy()
    cfg = ModelConfig.from_dict(header["config"]) if header["config"] is not None else None
    return tensors, cfg, header["meta"]


def save(path, tensors, config=None, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, config, meta))
    return path


def load(path):
    return loads(Path(path).read_bytes())


def save_backbone(backbone, path, meta=None) -> Path:
    tensors = {k: v.detach().cpu().numpy() for k, v in backbone.state_dict().items()}
    return save(path, tensors, backbone.config, meta)


def load_backbone(path, dtype: torch.dtype = torch.float32):
    from .model import Backbone

    tensors, config, meta = load(path)
    if config is None:
        raise CheckpointError("backbone checkpoint carries no model config")
    model = Backbone(config)
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise CheckpointError(f"checkpoint/model tensor names differ: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.to(dtype)
    return model.freeze()
