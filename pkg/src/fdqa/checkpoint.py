"""Binary checkpoint format for :class:`~fdqa.backbones.Network`.

Layout (all integers little-endian)::

    b"FDQA" | u32 version=1 | u32 len | descriptor (UTF-8 key=value lines)
    | u32 tensor count | per tensor: u16 name len, name, u8 dtype (0=f32),
      u8 rank, rank x u32 dims, row-major f32 payload

Batch-norm running statistics are stored as tensors named
``<bn>.running_mean`` / ``<bn>.running_var`` after the parameters.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .backbones import Network, describe, from_description
from .tensor import FLOAT, RunningStats, Tensor

MAGIC = b"FDQA"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _named_arrays(net: Network) -> list[tuple[str, np.ndarray]]:
    items = [(name, p.data) for name, p in net.params.items()]
    for name, st in net.stats.items():
        items.append((name + ".running_mean", st.mean))
        items.append((name + ".running_var", st.var))
    return items


def dumps(net: Network) -> bytes:
    desc = describe(net).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc]
    arrays = _named_arrays(net)
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(net: Network, path: str | os.PathLike) -> None:
    Path(path).write_bytes(dumps(net))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes) -> Network:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not an FDQA checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    (dlen,) = r.unpack("<I", "descriptor length")
    at = r.pos
    try:
        desc = r.take(dlen, "descriptor").decode("utf-8")
        net = from_description(desc)
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"invalid architecture descriptor: {exc}", at) from None
    expected = dict(_named_arrays(net))
    (count,) = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise CheckpointError(f"expected {len(expected)} tensors, found {count}", r.pos - 4)
    loaded: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "tensor name length")
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not UTF-8", at) from None
        dtype, rank = r.unpack("<BB", f"dtype/rank of {name}")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unsupported dtype code {dtype} for {name}", r.pos - 2)
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        if name not in expected or name in loaded:
            raise CheckpointError(f"unexpected tensor {name!r}", at)
        if tuple(dims) != expected[name].shape:
            raise CheckpointError(f"shape {list(dims)} of {name} does not match architecture", at)
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name}")
        loaded[name] = np.frombuffer(payload, dtype="<f4").astype(FLOAT).reshape(dims)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor", r.pos)
    for name in net.params:
        net.params[name] = Tensor(loaded[name], name=name)
    for name in net.stats:
        net.stats[name] = RunningStats(loaded[name + ".running_mean"], loaded[name + ".running_var"])
    return net


def load_checkpoint(path: str | os.PathLike) -> Network:
    return loads(Path(path).read_bytes())
