"""Checkpoint container.

Layout: ``E2EM`` magic, u32 version, u32 header length, UTF-8 JSON header,
then every tensor listed in the header as little-endian f32, row-major, in
header order. Parameters come first; optional extra tensors (optimizer
moments) follow them.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"E2EM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, header: Mapping, params: Mapping[str, np.ndarray], extra: Mapping[str, np.ndarray] | None = None) -> None:
    extra = extra or {}
    head = dict(header)
    head["params"] = [[k, list(v.shape)] for k, v in params.items()]
    head["extra"] = [[k, list(v.shape)] for k, v in extra.items()]
    blob = json.dumps(head, sort_keys=True, ensure_ascii=False).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for arr in (*params.values(), *extra.values()):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (magic {data[:4]!r})")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    out = []
    for section in ("params", "extra"):
        tensors = {}
        for name, shape in header[section]:
            n = math.prod(shape)
            if offset + 4 * n > len(data):
                raise CheckpointError(f"{path}: truncated at tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
            tensors[name] = arr.astype(np.float64)
            offset += 4 * n
        out.append(tensors)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return header, out[0], out[1]


def round_to_storage(arrays: Mapping[str, np.ndarray]) -> None:
    """Round arrays in place to the f32 values a checkpoint stores."""
    for a in arrays.values():
        a[...] = a.astype(np.float32).astype(np.float64)
