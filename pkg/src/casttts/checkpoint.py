"""Portable binary checkpoints.

Layout (all integers little-endian):
  magic      8 bytes  "CASTCKPT"
  version    u32
  seed       u64      run seed recorded for reproducibility audits
  prov_len   u16      followed by utf-8 stage provenance (e.g. "init>stage1")
  cfg_len    u32      followed by utf-8 JSON of the model BlockConfig
  n_tensors  u32
  per tensor: name (u16 len + utf-8), dtype code u8 (0 = f32), trainable u8,
              rank u8, dims (u32 each), payload (row-major f32 LE)

Tensors are written in sorted-name order, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .backbone import BlockConfig
from .model import TtsModel

MAGIC = b"CASTCKPT"
VERSION = 1
_DTYPE_F32 = 0


class CheckpointFormatError(ValueError):
    pass


@dataclass
class CheckpointMeta:
    seed: int
    stage_provenance: str


def save_checkpoint(path, model: TtsModel, meta: CheckpointMeta) -> None:
    cfg_json = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    prov = meta.stage_provenance.encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, meta.seed))
        f.write(struct.pack("<H", len(prov)) + prov)
        f.write(struct.pack("<I", len(cfg_json)) + cfg_json)
        params = sorted(model.named_parameters(), key=lambda kv: kv[0])
        f.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<BBB", _DTYPE_F32, 0 if p.frozen else 1, p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointFormatError("checkpoint truncated")
    return b


def load_checkpoint(path):
    """Rebuild the model recorded in the file. Returns (model, meta)."""
    with open(path, "rb") as f:
        if _read(f, 8) != MAGIC:
            raise CheckpointFormatError("bad checkpoint magic")
        version, seed = struct.unpack("<IQ", _read(f, 12))
        if version != VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (plen,) = struct.unpack("<H", _read(f, 2))
        prov = _read(f, plen).decode()
        (clen,) = struct.unpack("<I", _read(f, 4))
        cfg = BlockConfig(**json.loads(_read(f, clen).decode()))
        (n_tensors,) = struct.unpack("<I", _read(f, 4))

        tensors = {}
        flags = {}
        for _ in range(n_tensors):
            (nlen,) = struct.unpack("<H", _read(f, 2))
            name = _read(f, nlen).decode()
            dtype_code, trainable, rank = struct.unpack("<BBB", _read(f, 3))
            if dtype_code != _DTYPE_F32:
                raise CheckpointFormatError(f"unknown dtype code {dtype_code}")
            dims = struct.unpack(f"<{rank}I", _read(f, 4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(dims)
            tensors[name] = data
            flags[name] = bool(trainable)

    model = TtsModel(cfg, seed=int(seed))
    model_names = {n for n, _ in model.named_parameters()}
    if model_names != set(tensors):
        missing = model_names - set(tensors)
        extra = set(tensors) - model_names
        raise CheckpointFormatError(
            f"parameter set mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
        )
    for name, p in model.named_parameters():
        if tensors[name].shape != p.data.shape:
            raise CheckpointFormatError(
                f"shape mismatch for {name}: {tensors[name].shape} vs {p.data.shape}"
            )
        p.data = tensors[name].astype(np.float32).copy()
        if flags[name] != (not p.frozen):
            raise CheckpointFormatError(f"trainable flag mismatch for {name}")
    return model, CheckpointMeta(seed=int(seed), stage_provenance=prov)
