"""RCSC checkpoint container.

Layout (little-endian)::

    "RCSC"  u16 version  u64 config_hash  u64 iteration
    u32 len  config text (utf-8)
    u32 tensor_count
    per tensor: u16 name_len, name, u8 dtype (0=f32, 1=f64), u8 rank, u32 dims[rank], raw data

Loading verifies the stored hash against the embedded config text, so a
checkpoint always carries the exact configuration it was trained with.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .errors import CheckpointError, FormatError
from .utils import text_hash

logger = logging.getLogger(__name__)

MAGIC = b"RCSC"
VERSION = 1
_HEADER = struct.Struct("<4sHQQ")
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    config_text: str
    iteration: int
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_hash(self) -> int:
        return text_hash(self.config_text)


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray], config_text: str,
                    iteration: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [_HEADER.pack(MAGIC, VERSION, text_hash(config_text), iteration)]
    text = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(text)))
    chunks.append(text)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    logger.info("checkpoint written: %s (%d tensors, iteration %d)", path, len(tensors), iteration)
    return path


class _Reader:
    def __init__(self, raw: bytes, source: str) -> None:
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.raw):
            raise FormatError(f"{self.source}: truncated {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), str(path))
    magic, version, stored_hash, iteration = reader.unpack(_HEADER.format, "header")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    (text_len,) = reader.unpack("<I", "config length")
    config_text = reader.take(text_len, "config text").decode("utf-8")
    if text_hash(config_text) != stored_hash:
        raise CheckpointError(f"{path}: config hash does not match the embedded config")
    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        code, rank = reader.unpack("<BB", f"{name} header")
        if code not in _CODE_DTYPES:
            raise FormatError(f"{path}: tensor {name} has unknown dtype code {code}", offset=reader.pos - 2)
        dims = reader.unpack(f"<{rank}I", f"{name} dims")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = reader.take(nbytes, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if reader.pos != len(reader.raw):
        raise FormatError(f"{path}: {len(reader.raw) - reader.pos} trailing bytes", offset=reader.pos)
    return Checkpoint(config_text=config_text, iteration=iteration, tensors=tensors)
