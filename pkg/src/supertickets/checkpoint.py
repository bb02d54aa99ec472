"""STKT checkpoint files.

Binary layout (little-endian)::

    b"STKT"  uint32 version  uint32 n_tensors
    repeat n_tensors:
        uint32 name_len  name (utf-8)  uint32 rank  uint32 dims[rank]  float32 data[prod(dims)]

Config and mask live in a JSON sidecar next to the binary file
(``<path>.json``).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import MaskSet, ModelConfig, ModelParams, param_shapes

MAGIC = b"STKT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an STKT file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def save(path, params: ModelParams, mask: MaskSet | None = None, extra: dict | None = None) -> None:
    """Write params (as float32) and the JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_tensors(path, params.tensors)
    meta = {"config": params.cfg.to_dict(), "mask": mask.to_dict() if mask is not None else None}
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load(path) -> tuple[ModelParams, MaskSet | None, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    meta = json.loads(sidecar_path(path).read_text())
    cfg = ModelConfig.from_dict(meta["config"])
    tensors = read_tensors(path)
    expected = param_shapes(cfg)
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    mask = MaskSet.from_dict(meta["mask"]) if meta.get("mask") is not None else None
    return ModelParams(cfg, {k: tensors[k] for k in expected}), mask, meta
