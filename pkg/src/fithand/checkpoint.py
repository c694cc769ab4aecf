"""Binary checkpoint format (all integers little-endian).

::

    b"FITH"
    u32  version (= 1)
    u32  config length, then that many bytes of UTF-8 ``key=value`` lines
    u32  tensor count
    per tensor: u16 name length, name, u8 ndim, u32 * ndim dims, f32 payload
    u32  CRC-32 of every byte after the magic
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, CheckpointError, TruncatedError, VersionError
from .network import ArchConfig, NetworkGraph, build_graph
from .tensor import Tensor

MAGIC = b"FITH"
VERSION = 1


def _config_block(config: dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")


def encode_checkpoint(g: NetworkGraph) -> bytes:
    body = bytearray()
    body += struct.pack("<I", VERSION)
    cfg = _config_block(g.config.to_dict())
    body += struct.pack("<I", len(cfg)) + cfg
    body += struct.pack("<I", len(g.params))
    for name, t in g.params.items():
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", t.data.ndim)
        body += struct.pack(f"<{t.data.ndim}I", *t.dims)
        body += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return MAGIC + bytes(body) + struct.pack("<I", crc)


class _Reader:
    def __init__(self, buf: bytes, start: int, end: int):
        self.buf, self.pos, self.end = buf, start, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(f"checkpoint truncated: need {n} bytes at offset {self.pos}, {self.end - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_body(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(buf, 8, len(buf) - 4)
    (cfg_len,) = r.unpack("<I")
    try:
        text = r.take(cfg_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ChecksumError(f"config block is not valid UTF-8: {exc}") from None
    config = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != r.end:
        raise ChecksumError(f"{r.end - r.pos} unexpected bytes before the checksum")
    return config, tensors


def decode_checkpoint(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint, checking magic, then CRC, then version.

    A CRC mismatch is reported as truncation when the body ends before its
    declared structure does, and as a checksum error otherwise.
    """
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a Fit-Hand checkpoint (magic {buf[:4]!r})")
    if len(buf) < 12:
        raise TruncatedError(f"checkpoint truncated at {len(buf)} bytes")
    (stored,) = struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(buf[4:-4]) & 0xFFFFFFFF
    if stored != actual:
        _parse_body(buf)  # raises TruncatedError if the structure runs short
        raise ChecksumError(f"CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    return _parse_body(buf)


def save_checkpoint(g: NetworkGraph, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_checkpoint(g))


def graph_from_checkpoint(config: dict[str, str], tensors: dict[str, np.ndarray]) -> NetworkGraph:
    g = build_graph(ArchConfig.from_dict(config), dtype=np.float32)
    if set(tensors) != set(g.params):
        missing = sorted(set(g.params) - set(tensors))
        extra = sorted(set(tensors) - set(g.params))
        raise CheckpointError(f"tensor names do not match the architecture (missing {missing}, unexpected {extra})")
    params = {}
    for name, ref in g.params.items():
        arr = tensors[name]
        if arr.shape != ref.dims:
            raise CheckpointError(f"tensor {name} has dims {arr.shape}, architecture expects {ref.dims}")
        params[name] = Tensor(arr.copy(), requires_grad=True, name=name)
    g.params = params
    return g


def load_checkpoint(path: str | os.PathLike) -> NetworkGraph:
    return graph_from_checkpoint(*decode_checkpoint(Path(path).read_bytes()))
