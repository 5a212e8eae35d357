"""Checkpoint files: one JSON header line, then raw little-endian float64 tensors.

The header carries ``format_version``, free-form ``config`` and a ``tensors``
manifest of ``{name, shape, offset}`` where ``offset`` counts float64 values
from the start of the binary section.
"""
from __future__ import annotations

import json
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


def dumps(config: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    manifest = []
    offset = 0
    for name, arr in tensors.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    header = {"format_version": FORMAT_VERSION, "config": config, "tensors": manifest}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    return head + body


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    data = np.frombuffer(blob[nl + 1:], dtype="<f8")
    tensors = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        a = entry["offset"]
        if a + size > data.size:
            raise ValueError(f"truncated checkpoint at tensor {entry['name']}")
        tensors[entry["name"]] = data[a:a + size].reshape(entry["shape"]).astype(np.float64)
    return header["config"], tensors


def save(path, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(config, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
