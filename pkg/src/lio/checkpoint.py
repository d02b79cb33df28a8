"""Checkpoint files: named float64 tensors plus a key=value header.

Layout (all integers little-endian):

    magic "LIOC" | u32 version | u32 header-length | header bytes |
    u32 tensor-count | entries

    entry: u16 name-length | name (UTF-8) | u8 dtype (0 = float64) |
           u8 rank | rank x u32 extents | row-major float64 payload

The header is UTF-8 ``key=value`` lines (sorted by key) carrying the
backbone/train configuration, the epoch and the rng state.  Save -> load
-> save round-trips byte-identically.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"LIOC"
VERSION = 1
DTYPE_F64 = 0


@dataclass
class Checkpoint:
    version: int
    header: dict[str, str]
    tensors: dict[str, np.ndarray]

    @property
    def epoch(self) -> int:
        return int(self.header.get("epoch", "0"))

    def backbone_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("backbone.")}

    def head_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("head.")}


def save(path, header: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    for key, val in header.items():
        if "=" in key or "\n" in key or "\n" in str(val):
            raise FormatError(f"header entry {key!r} contains reserved characters")
    hdr = "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(hdr))
    out += hdr
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<BB", DTYPE_F64, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated (need {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load(path) -> Checkpoint:
    path = str(path)
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.read(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC.decode()}")
    (version,) = struct.unpack("<I", r.read(4))
    if version != VERSION:
        raise FormatError(f"{path}: format version {version}, this build reads {VERSION}")
    (hlen,) = struct.unpack("<I", r.read(4))
    header = {}
    for line in r.read(hlen).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    (count,) = struct.unpack("<I", r.read(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.read(2))
        name = r.read(nlen).decode("utf-8")
        dtype, rank = struct.unpack("<BB", r.read(2))
        if dtype != DTYPE_F64:
            raise FormatError(f"{path}: unknown dtype code {dtype} for tensor {name!r}")
        shape = struct.unpack(f"<{rank}I", r.read(4 * rank))
        n = 1
        for e in shape:
            n *= e
        payload = r.read(8 * n)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after tensor table")
    return Checkpoint(version=version, header=header, tensors=tensors)
