"""``MAGNNCK1`` checkpoint files.

Layout (little-endian): 8-byte magic, u32 header length, UTF-8 JSON header
holding the model config, user/item counts and a tensor table
(name, shape, dtype), then each tensor's bytes row-major in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes

CHECKPOINT_MAGIC = b"MAGNNCK1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    pass


def save_checkpoint(params: ModelParams, config: ModelConfig, path, extra: dict | None = None) -> None:
    table = []
    for name, arr in params.tensors.items():
        kind = "float64" if arr.dtype == np.float64 else "float32"
        table.append({"name": name, "shape": list(arr.shape), "dtype": kind})
    header = {
        "config": config.to_dict(),
        "num_users": params.num_users,
        "num_items": params.num_items,
        "tensors": table,
    }
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for entry in table:
            arr = params.tensors[entry["name"]]
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[entry["dtype"]]).tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic or version (expected MAGNNCK1)")
        (n,) = struct.unpack("<I", head[8:])
        raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"{path}: truncated header")
    return json.loads(raw)


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Read params and config; with ``expected`` the shape-defining fields must agree."""
    buf = Path(path).read_bytes()
    header = read_header(path)
    config = ModelConfig(**header["config"])
    if expected is not None:
        for key in ("d", "h", "m", "variant"):
            got, want = getattr(config, key), getattr(expected, key)
            if got != want:
                raise CheckpointError(f"checkpoint {key}={got!r} does not match requested {key}={want!r}")
    m, n = header["num_users"], header["num_items"]
    shapes = param_shapes(config, m, n)
    offset = 12 + struct.unpack("<I", buf[8:12])[0]
    tensors = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shapes.get(name) != shape:
            raise CheckpointError(f"tensor {name} has shape {shape}, config implies {shapes.get(name)}")
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if offset + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        tensors[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if set(tensors) != set(shapes):
        raise CheckpointError(f"tensor set {sorted(tensors)} does not match variant {config.variant}")
    if offset != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - offset} trailing bytes")
    return ModelParams(tensors, m, n), config
