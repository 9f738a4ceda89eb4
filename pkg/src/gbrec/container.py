"""Versioned binary container shared by checkpoints and dataset bundles.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"GBRC"
    4       4     uint32 format version (currently 1)
    8       8     uint64 header length N in bytes
    16      N     UTF-8 JSON header (sorted keys, no whitespace)
    16+N    ...   tensor payloads, concatenated in header order

The header is ``{"kind": str, "meta": {...}, "tensors": [...]}`` where each
tensor entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``; ``offset``
is relative to the start of the payload section. Floating tensors are stored
as ``<f8`` and integer tensors as ``<i8``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"GBRC"
VERSION = 1

_DTYPES = {"f": "<f8", "i": "<i8", "u": "<i8", "b": "<i8"}


class ContainerError(ValueError):
    pass


def _canonical(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    try:
        dtype = _DTYPES[arr.dtype.kind]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}") from None
    return np.ascontiguousarray(arr, dtype=dtype)


def dumps(kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    """Serialize named arrays plus JSON metadata into container bytes."""
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = _canonical(arr)
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = {"kind": kind, "meta": dict(meta or {}), "tensors": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, *payloads])


def loads(data: bytes, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if data[:4] != MAGIC:
        raise ContainerError("not a gbrec container (bad magic)")
    if len(data) < 16:
        raise ContainerError("truncated container header")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if len(data) < 16 + hlen:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from None
    if kind is not None and header["kind"] != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header['kind']!r}")
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ContainerError(f"truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header["meta"]


def save(path: str | Path, kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(kind, tensors, meta))


def load(path: str | Path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes(), kind=kind)
