"""Single-file binary checkpoints: JSON header + little-endian float32 payload.

Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, then raw
tensor bytes. The header echoes the model config and carries a tensor
directory (name / shape / dtype / offset) into the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError

MAGIC = b"TGCKPT01"


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    directory = []
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        blob = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape),
                          "dtype": "float32", "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "tensors": directory}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise DatasetFormatError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        blob = payload[start:start + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise DatasetFormatError(f"{path}: truncated tensor payload for {entry['name']}")
        arr = np.frombuffer(blob, dtype=np.float32).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return header["config"], tensors
