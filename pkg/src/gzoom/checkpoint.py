"""Binary model checkpoints.

Layout (all integers little-endian):
    magic "GZCK" | u32 version=1 | u32 descriptor length | descriptor UTF-8
    u32 tensor count
    per tensor: u32 name length | name UTF-8 | u32 ndims | u32 dims[] | f32 payload

Parameters are stored as 32-bit floats, so a float32 model round-trips
bit-exactly.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from . import layers
from .errors import BadMagicError, DataFormatError, TruncatedError, VersionError
from .network import Model, ModelSpec

MAGIC = b"GZCK"
VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    desc = model.spec.descriptor().encode("utf-8")
    out += struct.pack("<I", len(desc))
    out += desc
    tensors = model.named_tensors()
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    desc = r.take(r.u32("descriptor length"), "descriptor").decode("utf-8")
    spec = ModelSpec.from_descriptor(desc)
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        ndims = r.u32(f"ndims of {name}")
        dims = struct.unpack(f"<{ndims}I", r.take(4 * ndims, f"dims of {name}"))
        n_items = int(np.prod(dims)) if dims else 1
        payload = r.take(4 * n_items, f"payload of tensor {name}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)

    blocks = []
    for i in range(1, len(spec.channels) + 1):
        try:
            w = tensors[f"block{i}.w"]
            b = tensors[f"block{i}.b"]
        except KeyError as exc:
            raise DataFormatError(f"{path}: missing tensor {exc.args[0]}") from exc
        blocks.append(layers.LayerParams(w, b))
    try:
        fc = layers.LayerParams(tensors["fc.w"], tensors["fc.b"])
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing tensor {exc.args[0]}") from exc
    model = Model(spec, blocks, fc)
    _check_shapes(model, path)
    return model


def _check_shapes(model: Model, path) -> None:
    in_ch = model.spec.in_channels
    for i, blk in enumerate(model.blocks, start=1):
        expect = (model.spec.channels[i - 1], in_ch, 3, 3)
        if blk.w.shape != expect:
            raise DataFormatError(
                f"{path}: tensor block{i}.w has shape {blk.w.shape}, expected {expect}")
        in_ch = model.spec.channels[i - 1]
    expect = (model.spec.num_classes, model.spec.channels[-1])
    if model.fc.w.shape != expect:
        raise DataFormatError(
            f"{path}: tensor fc.w has shape {model.fc.w.shape}, expected {expect}")


def checkpoint_hash(path) -> str:
    """SHA-256 of the checkpoint bytes, used in provenance manifests."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
