"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SKD1" | u32 version | u64 header_len | header (UTF-8 JSON, sorted keys)
    u32 n_tensors
    n_tensors x ( u16 name_len | name | u8 dtype_tag | u8 ndim | ndim x u64 dim | raw data )
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SKD1"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<i4"), 5: np.dtype("u1"), 6: np.dtype("?")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        tag = next((t for t, d in _DTYPES.items() if (d.kind, d.itemsize) == (arr.dtype.kind, arr.dtype.itemsize)), None)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad magic at offset 0 (not a checkpoint file)")
    if len(data) < 8:
        raise CheckpointError("truncated header at offset 4")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} not supported (expected {VERSION})")
    if len(data) < 20:
        raise CheckpointError(f"truncated file at offset {len(data)}")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    body = data[:-4]
    pos = 8

    def need(n):
        if pos + n > len(body):
            raise CheckpointError(f"truncated data at offset {pos} (need {n} bytes)")

    need(8)
    (hlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    need(hlen)
    try:
        meta = json.loads(body[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt header at offset {pos}: {err}") from None
    pos += hlen
    need(4)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        start = pos
        need(2)
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(nlen + 2)
        try:
            name = body[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupt tensor name at offset {pos}") from None
        pos += nlen
        tag, ndim = struct.unpack_from("<BB", body, pos)
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} at offset {pos}")
        pos += 2
        need(8 * ndim)
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        need(nbytes)
        tensors[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
        if not name:
            raise CheckpointError(f"empty tensor name at offset {start}")
    if pos != len(body):
        raise CheckpointError(f"trailing garbage at offset {pos}")
    if zlib.crc32(body) != stored_crc:
        raise CheckpointError(f"checksum mismatch (offset {len(body)})")
    return Checkpoint(tensors, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_into_network(ckpt: Checkpoint, network, prefix: str = "model") -> None:
    """Copy ``prefix/`` tensors into ``network``; any shape mismatch names the tensor."""
    arch = ckpt.meta.get("arch")
    state = ckpt.group(prefix)
    network.check_state_dict(state)
    if arch is not None and hasattr(network, "spec") and arch != network.spec.to_dict():
        raise ValueError(f"architecture mismatch: checkpoint {arch} vs network {network.spec.to_dict()}")
    network.load_state_dict(state)
