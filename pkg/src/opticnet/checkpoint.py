"""The ``.optn`` tensor container.

Layout (all integers little-endian)::

    b"OPTN"  u32 version
    repeated until EOF:
        u32 path_len, path (utf-8), u8 dtype tag, u32 rank, rank * u32 dims,
        raw little-endian payload (C order)

dtype tags: 0 float32, 1 float64, 2 uint8, 3 int64.  The record ``meta/config``
(uint8) holds the model configuration as JSON.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OPTN"
VERSION = 1
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2, np.dtype("<i8"): 3}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}
META_PATH = "meta/config"


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"checkpoint/model mismatch at {path!r}: {detail}")
        self.path = path


def record_size(path: str, arr: np.ndarray) -> int:
    return 4 + len(path.encode()) + 1 + 4 + 4 * arr.ndim + arr.nbytes


def write_tensors(file, tensors: dict[str, np.ndarray]) -> int:
    buf = bytearray(MAGIC + struct.pack("<I", VERSION))
    for path, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {path}")
        name = path.encode()
        buf += struct.pack("<I", len(name)) + name
        buf += struct.pack("<BI", DTYPE_TAGS[dt], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()
    Path(file).write_bytes(bytes(buf))
    return len(buf)


def read_tensors(file) -> dict[str, np.ndarray]:
    raw = Path(file).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{file}: not an OPTN container")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{file}: unsupported container version {version}")
    pos, out = 8, {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            path = raw[pos:pos + n].decode()
            pos += n
            tag, rank = struct.unpack_from("<BI", raw, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            dt = TAG_DTYPES[tag]
            count = int(np.prod(dims, dtype=np.int64))
            out[path] = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(dims).copy()
            pos += count * dt.itemsize
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{file}: truncated or corrupt record ({exc})") from None
    return out


def model_state(model) -> dict[str, np.ndarray]:
    state = {p: v.data for p, v in model.named_variables()}
    state.update(dict(model.named_buffers()))
    return state


def config_to_json(cfg) -> str:
    return json.dumps(dataclasses.asdict(cfg))


def config_from_json(text: str):
    from opticnet.model import ModelConfig, ResidualUnitConfig, StageConfig

    d = json.loads(text)
    stages = tuple(StageConfig(tuple(s["res_conv_widths"]), ResidualUnitConfig(**s["unit"]),
                               s["repeats"], s["downsample"]) for s in d.pop("stages"))
    return ModelConfig(stages=stages, **d)


def save_checkpoint(model, file) -> int:
    tensors = {META_PATH: np.frombuffer(config_to_json(model.cfg).encode(), dtype=np.uint8)}
    tensors.update(model_state(model))
    return write_tensors(file, tensors)


def read_config(file):
    tensors = read_tensors(file)
    if META_PATH not in tensors:
        raise CheckpointError(f"{file}: no {META_PATH} record")
    return config_from_json(tensors[META_PATH].tobytes().decode())


def load_state(model, tensors: dict[str, np.ndarray]) -> None:
    """Copy tensors into the model in place; the first mismatched path is reported."""
    expected = model_state(model)
    for path, target in expected.items():
        if path not in tensors:
            raise CheckpointMismatch(path, "missing from checkpoint")
        src = tensors[path]
        if src.shape != target.shape:
            raise CheckpointMismatch(path, f"shape {src.shape} vs model {target.shape}")
    extra = [p for p in tensors if p not in expected and p != META_PATH]
    if extra:
        raise CheckpointMismatch(extra[0], "not present in model")
    for path, target in expected.items():
        target[...] = tensors[path]


def load_checkpoint(model, file) -> None:
    load_state(model, read_tensors(file))


def estimate_checkpoint_bytes(model) -> int:
    meta = config_to_json(model.cfg).encode()
    total = 8 + record_size(META_PATH, np.frombuffer(meta, dtype=np.uint8))
    return total + sum(record_size(p, a) for p, a in model_state(model).items())
