"""Binary weight checkpoints.

Layout (all integers little-endian)::

    b"BGCN"  u16 version  u64 topology hash
    u32 config length, UTF-8 JSON build config
    u32 tensor count
    per tensor: u16 name length, name, u8 dtype code, u8 rank, u32 extents[rank], u64 payload offset
    payload: little-endian float arrays, offsets relative to payload start
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .branchy import BranchyConfig, BranchyGhostNet, build_from_config

MAGIC = b"BGCN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointFormatError(ValueError):
    pass


class TopologyMismatchError(CheckpointFormatError):
    pass


class IncompleteCheckpointError(CheckpointFormatError):
    pass


def topology_hash(model: BranchyGhostNet) -> int:
    h = hashlib.blake2b(digest_size=8)
    arch = json.loads(model.config.to_json())
    h.update(json.dumps(arch, sort_keys=True).encode())
    for name, arr in model.state_dict().items():
        h.update(f"{name}:{tuple(arr.shape)};".encode())
    return int.from_bytes(h.digest(), "little")


def save_weights(model: BranchyGhostNet, path) -> None:
    state = model.state_dict()
    config = model.config.to_json().encode()
    table = bytearray()
    payload = bytearray()
    for name, arr in state.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointFormatError(f"cannot store dtype {arr.dtype} for {name}")
        raw = name.encode()
        table += struct.pack("<H", len(raw)) + raw
        table += struct.pack("<BB", code, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", len(payload))
        payload += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    header = MAGIC + struct.pack("<HQ", VERSION, topology_hash(model))
    header += struct.pack("<I", len(config)) + config + struct.pack("<I", len(state))
    Path(path).write_bytes(bytes(header + table + payload))


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[BranchyConfig, int, dict]:
    """Parse a checkpoint into (config, stored topology hash, tensors)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not a BGCN checkpoint")
    version, stored_hash = r.unpack("<HQ")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    try:
        config = BranchyConfig.from_json(r.take(cfg_len).decode())
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointFormatError(f"corrupt build config: {exc}") from exc
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode()
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("corrupt tensor name") from exc
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{rank}I")
        (offset,) = r.unpack("<Q")
        entries.append((name, _DTYPES[code], shape, offset))
    base = r.pos
    tensors = {}
    for name, dtype, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = base + offset
        if start + nbytes > len(r.buf):
            raise CheckpointFormatError(f"checkpoint truncated inside tensor {name}")
        tensors[name] = np.frombuffer(r.buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=start).reshape(shape)
    return config, stored_hash, tensors


def load_weights(path, model: BranchyGhostNet | None = None) -> BranchyGhostNet:
    """Load a checkpoint, rebuilding the stored architecture unless ``model`` is given.

    Raises :class:`TopologyMismatchError` when the file was written for a
    different architecture and :class:`IncompleteCheckpointError` when a
    tensor is missing. Nothing is modified on failure.
    """
    config, stored_hash, tensors = read_checkpoint(path)
    if model is None:
        model = build_from_config(config, strict=False)
    if topology_hash(model) != stored_hash:
        raise TopologyMismatchError("checkpoint topology hash does not match the model architecture")
    expected = model.state_dict()
    missing = [name for name in expected if name not in tensors]
    if missing:
        raise IncompleteCheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
    for name, arr in expected.items():
        if tensors[name].shape != arr.shape:
            raise CheckpointFormatError(f"tensor {name} has shape {tensors[name].shape}, expected {arr.shape}")
    model.load_state_dict(tensors)
    return model
