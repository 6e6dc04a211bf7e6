"""Self-describing checkpoint container.

Layout (little-endian throughout): 8-byte magic, int32 format version,
int64 JSON header length, UTF-8 JSON header, then the raw float32 parameter
blobs in header order. The header echoes the model config and a manifest of
(name, shape) pairs, so a file is loadable without outside context.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import FlowModel, ModelConfig

MAGIC = b"FLOWCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: FlowModel, extra: dict = None) -> None:
    names = sorted(model.params)
    header = {
        "config": model.config.to_dict(),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<iq", VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(model.params[n].data.astype("<f4").tobytes())


def load_checkpoint(path) -> FlowModel:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<iq", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[20:20 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    config = ModelConfig.from_dict(header["config"])
    model = FlowModel(config, seed=0)
    offset = 20 + hlen
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in model.params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if model.params[name].shape != shape:
            raise CheckpointError(
                f"{path}: {name} has shape {shape}, model expects "
                f"{model.params[name].shape}")
        n_bytes = int(np.prod(shape)) * 4
        if offset + n_bytes > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data")
        arr = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)),
                            offset=offset).reshape(shape)
        # copy in place: model layers hold references to these tensors
        model.params[name].data[...] = arr.astype(config.np_dtype)
        offset += n_bytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")
    return model
