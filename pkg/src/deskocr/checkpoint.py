"""OCKT binary checkpoints.

Layout (all integers little-endian u32, strings length-prefixed UTF-8):

    magic b"OCKT" | version | fingerprint str | meta JSON str |
    n_records | records... | crc32 of everything before it

Each record is ``name str | ndim | dims... | float32 little-endian data``.
Loading verifies the trailing CRC32 first, so any single corrupted byte
is detected before parsing.
"""

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .module import Module, load_arrays

MAGIC = b"OCKT"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    fingerprint: str
    arrays: dict
    meta: dict = field(default_factory=dict)


def _pack_str(buf: bytearray, s: str):
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def save_checkpoint(path, model, fingerprint: str = "", meta: dict | None = None):
    """`model` is a Module or a {name: float32 ndarray} dict."""
    arrays = dict(model.named_arrays()) if isinstance(model, Module) else model
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    _pack_str(buf, fingerprint)
    _pack_str(buf, json.dumps(meta or {}, sort_keys=True))
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name}: only float32 arrays are stored, got {arr.dtype}")
        _pack_str(buf, name)
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.off}, "
                f"file holds {len(self.blob)}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"truncated checkpoint: only {len(blob)} bytes")
    body, (stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not an OCKT checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fp = r.string()
    meta = json.loads(r.string())
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4")
        arrays[name] = data.reshape(shape).astype(np.float32)
    if r.off != len(body):
        raise CheckpointError(f"trailing garbage at offset {r.off}")
    return Checkpoint(version, fp, arrays, meta)


def apply_checkpoint(model: Module, ckpt: Checkpoint, fingerprint: str | None = None,
                     strict: bool = True):
    """Copy checkpoint arrays into `model`. Fingerprint mismatch warns;
    shape mismatch raises (inside load_arrays). Returns
    (loaded, unused, fresh) name lists."""
    if fingerprint is not None and ckpt.fingerprint and ckpt.fingerprint != fingerprint:
        warnings.warn(f"checkpoint fingerprint {ckpt.fingerprint} does not match "
                      f"run config {fingerprint}; loading anyway")
    return load_arrays(model, ckpt.arrays, strict=strict)
