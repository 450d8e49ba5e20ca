"""Binary checkpoints for model parameters.

Layout (all integers little-endian u32 unless noted):

    magic   4 bytes  'CLCK'
    version u32
    meta    u32 byte length + UTF-8 JSON (model kind, step, config hash, ...)
    count   u32 number of tensors
    per tensor:
        name    u32 byte length + UTF-8
        is_bias u8
        ndim    u32
        dims    ndim x u32
        data    product(dims) x float64 little-endian

Tensors are written in sorted-name order so identical parameters always
produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import ModelParams, Tensor
from .errors import DataError, UsageError

CHECKPOINT_MAGIC = b"CLCK"
CHECKPOINT_VERSION = 1


def _u32(*values: int) -> bytes:
    return np.array(values, dtype="<u4").tobytes()


def save_checkpoint(path, params: ModelParams, meta: dict) -> None:
    """Write parameters plus a small JSON meta block.

    Meta must be JSON-serializable; keys are sorted on write so the same
    dict always serializes to the same bytes.
    """
    try:
        meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    except TypeError as exc:
        raise UsageError(f"save_checkpoint: meta is not JSON-serializable: {exc}") from None
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_u32(CHECKPOINT_VERSION))
        fh.write(_u32(len(meta_blob)))
        fh.write(meta_blob)
        names = sorted(params.names())
        fh.write(_u32(len(names)))
        for name in names:
            tensor = params[name]
            encoded = name.encode("utf-8")
            fh.write(_u32(len(encoded)))
            fh.write(encoded)
            fh.write(bytes([1 if params.is_bias(name) else 0]))
            fh.write(_u32(tensor.ndim, *tensor.shape))
            fh.write(tensor.data.astype("<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = np.frombuffer(self.take(4 * count), dtype="<u4")
        return int(vals[0]) if count == 1 else [int(v) for v in vals]


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns (params, meta)."""
    path = Path(path)
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt meta block: {exc}") from None
    count = r.u32()
    values: dict[str, Tensor] = {}
    biases: set[str] = set()
    for _ in range(count):
        name_len = r.u32()
        name = r.take(name_len).decode("utf-8")
        if r.take(1)[0]:
            biases.add(name)
        ndim = r.u32()
        dims = [r.u32() for _ in range(ndim)]
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").copy().reshape(dims)
        values[name] = Tensor(data)
    if r.pos != len(r.blob):
        raise DataError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    return ModelParams(values, bias_names=biases), meta


def checkpoint_digest(path) -> str:
    """SHA-256 hex digest of a checkpoint file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
