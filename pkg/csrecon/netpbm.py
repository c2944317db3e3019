"""Image files: 8-bit PGM/PPM (binary P5/P6) and the float planar RCSI format.

8-bit samples map to ``[0, 1]`` by ``/255`` on read and ``rint(255 v)`` on
write. Images are returned channel-first ``(C, H, W)`` float32.

RCSI layout: ``"RCSI"``, u16 version, u32 C, u32 H, u32 W, then C*H*W
little-endian float32 values, plane by plane.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import FormatError, ShapeError

RCSI_MAGIC = b"RCSI"
RCSI_VERSION = 1
_RCSI_HEADER = struct.Struct("<4sHIII")
_WHITESPACE = b" \t\n\r\x0b\x0c"
BT601 = np.array([0.299, 0.587, 0.114])


def _header_fields(raw: bytes, count: int, source: str) -> Tuple[list, int]:
    """Read ``count`` whitespace-separated ASCII fields after the magic; returns them and the data offset."""
    fields = []
    pos = 2
    while len(fields) < count:
        while pos < len(raw) and raw[pos] in _WHITESPACE:
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos] not in _WHITESPACE:
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated header", offset=pos)
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"{source}: malformed header field {token!r}", offset=start)
        fields.append(int(token))
    if pos >= len(raw) or raw[pos] not in _WHITESPACE:
        raise FormatError(f"{source}: header not followed by a single whitespace byte", offset=pos)
    return fields, pos + 1


def decode_netpbm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{source}: not a binary PGM/PPM (magic {magic!r})", offset=0)
    (width, height, maxval), offset = _header_fields(raw, 3, source)
    if maxval != 255:
        raise FormatError(f"{source}: only maxval 255 is supported, got {maxval}", offset=offset - 1)
    if width == 0 or height == 0:
        raise FormatError(f"{source}: empty image {width}x{height}", offset=2)
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = raw[offset:offset + expected]
    if len(payload) < expected:
        raise FormatError(
            f"{source}: pixel data truncated ({len(payload)} of {expected} bytes)",
            offset=offset + len(payload),
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def encode_netpbm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise FormatError(f"PGM/PPM needs (1|3, H, W), got {image.shape}")
    channels, height, width = image.shape
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = "P5" if channels == 1 else "P6"
    header = f"{magic}\n{width} {height}\n255\n".encode("ascii")
    return header + pixels.transpose(1, 2, 0).tobytes()


def decode_rcsi(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < _RCSI_HEADER.size:
        raise FormatError(f"{source}: truncated RCSI header", offset=len(raw))
    magic, version, c, h, w = _RCSI_HEADER.unpack_from(raw)
    if magic != RCSI_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}", offset=0)
    if version != RCSI_VERSION:
        raise FormatError(f"{source}: unsupported RCSI version {version}", offset=4)
    expected = _RCSI_HEADER.size + 4 * c * h * w
    if len(raw) < expected:
        raise FormatError(f"{source}: pixel data truncated", offset=len(raw))
    data = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=_RCSI_HEADER.size)
    return data.reshape(c, h, w).astype(np.float32)


def encode_rcsi(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    return _RCSI_HEADER.pack(RCSI_MAGIC, RCSI_VERSION, c, h, w) + np.ascontiguousarray(image).tobytes()


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Read a PGM, PPM or RCSI file as ``(C, H, W)`` float32."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"image not found: {path}")
    raw = path.read_bytes()
    if raw[:4] == RCSI_MAGIC:
        return decode_rcsi(raw, str(path))
    return decode_netpbm(raw, str(path))


def write_image(path: Union[str, Path], image: np.ndarray) -> Path:
    """Write by extension: ``.rcsi`` keeps floats, anything else is 8-bit PGM/PPM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".rcsi":
        path.write_bytes(encode_rcsi(image))
    else:
        path.write_bytes(encode_netpbm(image))
    return path


IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".rcsi")


def to_luma(image: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an RGB ``(3, H, W)`` image; grayscale passes through."""
    image = np.asarray(image)
    if image.shape[0] == 1:
        return image
    if image.shape[0] != 3:
        raise ShapeError(f"luma needs 1 or 3 channels, got {image.shape[0]}")
    return np.tensordot(BT601, image, axes=(0, 0))[None]
