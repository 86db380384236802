"""Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CYCVAE\\x00\\x00"
    u32       format version (currently 1)
    u32       header length N
    N bytes   UTF-8 JSON header: {"model_config": {...}, "blocks": [[name, shape], ...], "extra": {...}}
    ...       one block per header entry, in order, as little-endian float32

Model parameters come first in declaration order; training checkpoints append
optimizer moments as further named blocks and keep counters plus the RNG state
under ``extra``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, parameter_shapes

MAGIC = b"CYCVAE\x00\x00"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, extra_blocks: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> None:
    blocks = dict(params.arrays)
    for name, array in (extra_blocks or {}).items():
        if name in blocks:
            raise ValueError(f"duplicate block name {name}")
        blocks[name] = array
    header = {
        "model_config": params.config.to_dict(),
        "blocks": [[name, list(a.shape)] for name, a in blocks.items()],
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for array in blocks.values():
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    """Return (params, non-parameter blocks, extra header data)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode())
        cfg = header["model_config"]
        config = ModelConfig(**cfg)
        block_specs = [(name, tuple(shape)) for name, shape in header["blocks"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    offset = 16 + header_len
    blocks: dict[str, np.ndarray] = {}
    for name, shape in block_specs:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointFormatError(f"{path}: truncated in block {name}")
        blocks[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(dtype)
        offset = end
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    names = list(parameter_shapes(config))
    try:
        params = ModelParams.from_arrays(config, {n: blocks.pop(n) for n in names})
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: parameter blocks do not match the model config ({exc})") from exc
    return params, blocks, header.get("extra", {})
