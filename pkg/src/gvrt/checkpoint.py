"""Versioned binary container for named parameter tensors, plus a JSON sidecar.

Layout: ``b"GVRTCKPT"`` | uint32 version | uint64 header length | JSON header | raw
little-endian tensor bytes at the offsets listed in the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"GVRTCKPT"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1"}


def save_checkpoint(path, tensors: dict, sidecar: dict = None):
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[t.dtype]).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    if sidecar is not None:
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_checkpoint(path):
    """Return ``(tensors, sidecar)``; ``sidecar`` is ``None`` when the JSON file is absent."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        buf = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    side = path.with_suffix(".json")
    return tensors, (json.loads(side.read_text()) if side.exists() else None)
