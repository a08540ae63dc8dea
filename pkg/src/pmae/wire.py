"""Byte format for restore records sent from clients to the server.

Record layout (integers little-endian)::

    off  size
    0    4     magic b"PMRI"
    4    1     version (1)
    5    1     reserved, must be 0
    6    8     model config hash
    14   4     label (uint32)
    18   4     num_patches N (uint32)
    22   4     visible_count V (uint32)
    26   4     token width D (uint32)
    30   4     CRC32 of bytes [0, 30)
    34   4*V*D visible tokens, float32, row-major
    ..   var   N restore ids, unsigned LEB128 varints
    ..   4     CRC32 of the token payload and varints

A restore-set file is ``b"PMRS"``, a version byte, a uint32 record count,
then for each record a uint32 byte length followed by the record.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .masking import RestoreInfo

MAGIC = b"PMRI"
SET_MAGIC = b"PMRS"
VERSION = 1
_HEADER = struct.Struct("<4sBB8sIIII")
_U32 = struct.Struct("<I")


class WireError(ValueError):
    """Raised for records that cannot be encoded or decoded."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def _put_varint(out: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _get_varint(buf: bytes, pos: int) -> tuple[int, int]:
    shift = result = 0
    start = pos
    while True:
        if pos >= len(buf):
            raise WireError("truncated varint", start)
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise WireError("varint too long", start)


def encode(r: RestoreInfo) -> bytes:
    toks = np.asarray(r.visible_tokens)
    if toks.ndim != 2 or toks.shape[0] == 0:
        raise WireError("restore record has no visible tokens")
    if r.label < 0:
        raise WireError(f"negative label {r.label}")
    if len(r.config_hash) != 8:
        raise WireError("config hash must be 8 bytes")
    v, d = toks.shape
    n = r.restore_ids.shape[0]
    head = _HEADER.pack(MAGIC, VERSION, 0, bytes(r.config_hash), r.label, n, v, d)
    out = bytearray(head)
    out += _U32.pack(zlib.crc32(head))
    body = bytearray(np.ascontiguousarray(toks, dtype="<f4").tobytes())
    for i in r.restore_ids.tolist():
        _put_varint(body, int(i))
    out += body
    out += _U32.pack(zlib.crc32(body))
    return bytes(out)


def decode_from(buf: bytes, offset: int = 0) -> tuple[RestoreInfo, int]:
    """Decode one record starting at ``offset``; returns it and the end offset."""
    if len(buf) - offset < _HEADER.size + 4:
        raise WireError("truncated record header", offset)
    magic, version, reserved, chash, label, n, v, d = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise WireError("bad record magic", offset)
    if version != VERSION:
        raise WireError(f"unsupported record version {version}", offset + 4)
    (hcrc,) = _U32.unpack_from(buf, offset + _HEADER.size)
    if zlib.crc32(buf[offset : offset + _HEADER.size]) != hcrc:
        raise WireError("record header checksum mismatch", offset + _HEADER.size)
    if reserved != 0:
        raise WireError("reserved header byte is nonzero", offset + 5)
    if v == 0:
        raise WireError("record declares no visible tokens", offset + 22)
    pos = offset + _HEADER.size + 4
    body_start = pos
    nbytes = 4 * v * d
    if len(buf) - pos < nbytes:
        raise WireError("truncated token payload", pos)
    toks = np.frombuffer(buf, dtype="<f4", count=v * d, offset=pos).reshape(v, d).astype(np.float32)
    pos += nbytes
    ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        ids[i], pos = _get_varint(buf, pos)
    if len(buf) - pos < 4:
        raise WireError("truncated payload checksum", pos)
    (bcrc,) = _U32.unpack_from(buf, pos)
    if zlib.crc32(buf[body_start:pos]) != bcrc:
        raise WireError("record payload checksum mismatch", pos)
    pos += 4
    if not np.array_equal(np.sort(ids), np.arange(n)):
        raise WireError("restore ids are not a permutation", body_start + nbytes)
    return RestoreInfo(toks, ids, int(label), bytes(chash)), pos


def decode(buf: bytes) -> RestoreInfo:
    r, end = decode_from(buf, 0)
    if end != len(buf):
        raise WireError("trailing bytes after record", end)
    return r


def encode_set(records: Sequence[RestoreInfo]) -> bytes:
    out = bytearray(SET_MAGIC)
    out.append(VERSION)
    out += _U32.pack(len(records))
    for r in records:
        blob = encode(r)
        out += _U32.pack(len(blob))
        out += blob
    return bytes(out)


def decode_set(buf: bytes) -> list[RestoreInfo]:
    if len(buf) < 9:
        raise WireError("truncated restore-set header", 0)
    if buf[:4] != SET_MAGIC:
        raise WireError("bad restore-set magic", 0)
    if buf[4] != VERSION:
        raise WireError(f"unsupported restore-set version {buf[4]}", 4)
    (count,) = _U32.unpack_from(buf, 5)
    pos = 9
    out = []
    for _ in range(count):
        if len(buf) - pos < 4:
            raise WireError("truncated record length", pos)
        (length,) = _U32.unpack_from(buf, pos)
        pos += 4
        r, end = decode_from(buf[: pos + length], pos)
        if end != pos + length:
            raise WireError("record length mismatch", pos)
        out.append(r)
        pos = end
    if pos != len(buf):
        raise WireError("trailing bytes after restore set", pos)
    return out


def write_restore_set(path, records: Iterable[RestoreInfo]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_set(list(records)))
    return path


def read_restore_set(path) -> list[RestoreInfo]:
    return decode_set(Path(path).read_bytes())
