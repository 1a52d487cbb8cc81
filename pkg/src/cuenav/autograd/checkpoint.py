"""Flat checkpoint archive.

Layout (all integers little-endian):

    b"CUECKPT\\0"                 8-byte magic
    uint32 version
    uint32 header_length
    header_length bytes of UTF-8 JSON:
        {"meta": {...}, "tensors": [{"name", "shape", "offset", "count"}, ...]}
    float32 little-endian payload, tensors concatenated in header order

Names are dot-separated parameter paths. Writing is byte-deterministic: no
timestamps, sorted names.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CUECKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    names = sorted(arrays)
    entries = []
    offset = 0
    for name in names:
        arr = np.asarray(arrays[name])
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += int(arr.size)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    arrays = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        arrays[e["name"]] = chunk.reshape(e["shape"]).astype(np.float32)
    return arrays, header["meta"]


def load_into(params: Mapping[str, "np.ndarray | object"], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy ``arrays`` into named parameters, rejecting unknown names and shape mismatches."""
    unknown = sorted(set(arrays) - set(params))
    if unknown:
        raise CheckpointError(f"unknown parameter names in checkpoint: {unknown[:5]}")
    for name, arr in arrays.items():
        p = params[name]
        if tuple(p.shape) != tuple(arr.shape):
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}")
    for name, arr in arrays.items():
        p = params[name]
        p.data[...] = arr
