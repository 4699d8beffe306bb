"""Flat binary weight container.

Layout (all integers little-endian u32):

    magic "SKWS" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 payload

Payloads are little-endian float32 regardless of in-memory dtype.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import ParseError
from .tensor import Tensor

MAGIC = b"SKWS"
VERSION = 1

_U32 = struct.Struct("<I")


def save_tensors(path, entries: Mapping[str, "np.ndarray | Tensor"]) -> None:
    """Write named arrays to `path` in the container format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        fh.write(_U32.pack(len(entries)))
        for name, value in entries.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U32.pack(arr.ndim))
            for extent in arr.shape:
                fh.write(_U32.pack(extent))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a container back into a name -> float32 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return loads_tensors(blob)


def loads_tensors(blob: bytes) -> dict[str, np.ndarray]:
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ParseError(f"truncated container: need {n} bytes for {what} at offset {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise ParseError("bad magic bytes; not a SKWS weight container")
    version = _U32.unpack(take(4, "version"))[0]
    if version != VERSION:
        raise ParseError(f"unsupported container version {version}")
    count = _U32.unpack(take(4, "entry count"))[0]

    out: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = _U32.unpack(take(4, f"name length of entry {i}"))[0]
        name = take(name_len, f"name of entry {i}").decode("utf-8")
        rank = _U32.unpack(take(4, f"rank of {name!r}"))[0]
        shape = tuple(
            _U32.unpack(take(4, f"extent {d} of {name!r}"))[0] for d in range(rank)
        )
        n_items = 1
        for extent in shape:
            n_items *= extent
        payload = take(4 * n_items, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if off != len(blob):
        raise ParseError(f"{len(blob) - off} trailing bytes after last entry")
    return out


def encode_text(text: str) -> np.ndarray:
    """Represent UTF-8 text as a rank-1 float array of byte values.

    Lets text blocks (config snapshots) ride along in the weight container.
    """
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode("utf-8")
