"""Versioned binary snapshots: parameters plus a JSON metadata header.

Layout, in order:

* 8-byte magic ``PCLSNAP1``
* version as little-endian uint32
* header length as little-endian uint32
* UTF-8 JSON header: arbitrary metadata under ``meta`` plus an ``arrays``
  table of name/shape/dtype/offset/nbytes records
* raw little-endian array payloads, concatenated in table order

Arrays round-trip bitwise: the payload is the exact buffer that was saved.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InputError

MAGIC = b"PCLSNAP1"
VERSION = 1


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_checkpoint(path: str, arrays: list[tuple[str, np.ndarray]], meta: dict) -> None:
    """Write named arrays and JSON-able metadata to ``path``."""
    table = []
    chunks = []
    offset = 0
    seen = set()
    for name, arr in arrays:
        if name in seen:
            raise InputError(f"duplicate array name {name!r} in checkpoint")
        seen.add(name)
        arr = _little_endian(arr)
        buf = arr.tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(buf),
        })
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta, "arrays": table}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for buf in chunks:
            f.write(buf)


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back as (metadata, name -> array)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise InputError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for rec in header["arrays"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise InputError(f"{path}: truncated payload for array {rec['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy()
        arrays[rec["name"]] = arr
    return header["meta"], arrays
