"""Block-based compressed sensing operator.

Every non-overlapping ``B x B`` tile of every channel is measured with the
same ``M x N`` matrix ``A`` (``N = B*B``). ``A`` has orthonormal rows, so
``A^T`` is an exact pseudo-inverse and ``A A^T = I``.

Tile layout: tile ``(c, i, j)`` of an image ``(C, H, W)`` flattens row-major
to ``x[c, i*B:(i+1)*B, j*B:(j+1)*B].ravel()``. Tiles are ordered by channel,
then block row, then block column; the flat measurement vector stacks the
``M`` values of each tile in that order.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import linalg

from .engine import Rng, Tensor, as_tensor
from .errors import FormatError, OperatorError, ShapeError
from .functional import matmul

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"RCSA"
MEASUREMENT_MAGIC = b"RCSM"
FORMAT_VERSION = 1
# magic, version, B, ratio, seed, M, N
_MATRIX_HEADER = struct.Struct("<4sHIdQII")
# magic, version, B, ratio, seed, M, N, C, H, W
_MEASUREMENT_HEADER = struct.Struct("<4sHIdQIIIII")


def measurement_count(block: int, ratio: float) -> int:
    """Rows per tile, ``floor(ratio * B^2 + 0.5)``."""
    return int(math.floor(ratio * block * block + 0.5))


@dataclass(eq=False)
class SamplingOperator:
    block: int
    ratio: float
    seed: int
    matrix: np.ndarray
    _cache: Dict[str, Tuple[Tensor, Tensor]] = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n(self) -> int:
        return int(self.matrix.shape[1])

    def constants(self, dtype: np.dtype) -> Tuple[Tensor, Tensor]:
        """``(A, A^T)`` as constant tensors of ``dtype``."""
        key = np.dtype(dtype).name
        pair = self._cache.get(key)
        if pair is None:
            a = np.ascontiguousarray(self.matrix, dtype=dtype)
            pair = (Tensor(a), Tensor(np.ascontiguousarray(a.T)))
            self._cache[key] = pair
        return pair

    def check_image_shape(self, shape: Tuple[int, ...]) -> Tuple[int, int, int]:
        if len(shape) != 3:
            raise ShapeError(f"images are (C, H, W), got shape {shape}")
        c, h, w = shape
        if h % self.block or w % self.block:
            raise ShapeError(f"image {h}x{w} is not divisible by block size {self.block}")
        return c, h // self.block, w // self.block

    # --- differentiable tile maps ---
    def tiles(self, x: Tensor) -> Tensor:
        """(C, H, W) -> (N, C*nh*nw), one column per tile."""
        c, nh, nw = self.check_image_shape(x.shape)
        b = self.block
        cols = x.reshape(c, nh, b, nw, b).permute(2, 4, 0, 1, 3)
        return cols.reshape(b * b, c * nh * nw)

    def untile(self, cols: Tensor, shape: Tuple[int, int, int]) -> Tensor:
        c, nh, nw = self.check_image_shape(shape)
        b = self.block
        img = cols.reshape(b, b, c, nh, nw).permute(2, 3, 0, 4, 1)
        return img.reshape(shape)

    def apply(self, x: Tensor) -> Tensor:
        """``A x`` per tile, as an ``(M, tiles)`` tensor."""
        a, _ = self.constants(x.dtype)
        return matmul(a, self.tiles(x))

    def adjoint(self, y: Tensor, shape: Tuple[int, int, int]) -> Tensor:
        """``A^T y`` per tile, reassembled into an image of ``shape``."""
        _, at = self.constants(y.dtype)
        return self.untile(matmul(at, y), shape)

    def project_range(self, x: Tensor) -> Tensor:
        """``A^T A x``: the component of ``x`` the measurements can see."""
        return self.adjoint(self.apply(x), x.shape)


@dataclass
class Measurement:
    """Measurements of one image: ``values`` is ``(M, C*nh*nw)``."""

    values: np.ndarray
    shape: Tuple[int, int, int]
    block: int
    ratio: float
    seed: int

    def flat(self) -> np.ndarray:
        """Per-tile stacked vector of length ``M * tiles``."""
        return np.ascontiguousarray(self.values.T).reshape(-1)

    def tensor(self, dtype: Optional[np.dtype] = None) -> Tensor:
        return Tensor(self.values.astype(dtype or self.values.dtype, copy=False))


def build_operator(block: int, ratio: float, seed: int) -> SamplingOperator:
    """Seeded ``M x N`` matrix with orthonormal rows.

    Draws an ``N x M`` standard normal matrix, takes its thin QR and fixes
    the signs so ``R`` has a positive diagonal; ``A = Q^T``.
    """
    if block < 1:
        raise OperatorError(f"block size must be >= 1, got {block}")
    if not 0.0 < ratio <= 1.0:
        raise OperatorError(f"sampling ratio must be in (0, 1], got {ratio}")
    n = block * block
    m = measurement_count(block, ratio)
    if m < 1:
        raise OperatorError(f"ratio {ratio} gives no measurements for block size {block}", block=block)
    gauss = Rng(seed).derive("operator").normal((n, m), dtype=np.float64)
    q, r = linalg.qr(gauss, mode="economic")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    matrix = (q * signs).T.copy()
    matrix.setflags(write=False)
    logger.debug("operator B=%d ratio=%.4f seed=%d -> M=%d N=%d", block, ratio, seed, m, n)
    return SamplingOperator(block=block, ratio=float(ratio), seed=int(seed), matrix=matrix)


def sample(op: SamplingOperator, x: Union[Tensor, np.ndarray]) -> Measurement:
    """Measure every tile of ``x``."""
    t = as_tensor(x)
    values = op.apply(t).data
    return Measurement(values=np.array(values), shape=tuple(t.shape), block=op.block,
                       ratio=op.ratio, seed=op.seed)


def back_project(op: SamplingOperator, y: Measurement) -> Tensor:
    """``A^T y`` image."""
    _check_measurement(op, y)
    return op.adjoint(y.tensor(), y.shape)


def rnd_project(op: SamplingOperator, x_hat: Tensor, y: Union[Measurement, Tensor]) -> Tensor:
    """Range-null-space correction ``x_hat + A^T (y - A x_hat)``; differentiable in ``x_hat``."""
    if isinstance(y, Measurement):
        _check_measurement(op, y, x_hat.shape)
        y = y.tensor(x_hat.dtype)
    ax = op.apply(x_hat)
    if y.shape != ax.shape:
        raise ShapeError(f"measurement shape {y.shape} does not match operator output {ax.shape}")
    return x_hat + op.adjoint(y - ax, x_hat.shape)


def _check_measurement(op: SamplingOperator, y: Measurement, shape: Optional[Tuple[int, ...]] = None) -> None:
    shape = tuple(shape) if shape is not None else y.shape
    c, nh, nw = op.check_image_shape(shape)
    expected = (op.m, c * nh * nw)
    if y.values.shape != expected:
        raise ShapeError(f"measurement has shape {y.values.shape}, operator expects {expected}")


# ==================== files ====================

def _read_file(path: Union[str, Path], what: str) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{what} file not found: {path}")
    return path.read_bytes()


def save_operator(path: Union[str, Path], op: SamplingOperator) -> None:
    header = _MATRIX_HEADER.pack(MATRIX_MAGIC, FORMAT_VERSION, op.block, op.ratio, op.seed, op.m, op.n)
    body = np.ascontiguousarray(op.matrix, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_operator(path: Union[str, Path]) -> SamplingOperator:
    raw = _read_file(path, "matrix")
    if len(raw) < _MATRIX_HEADER.size:
        raise FormatError(f"{path}: truncated matrix header", offset=len(raw))
    magic, version, block, ratio, seed, m, n = _MATRIX_HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = _MATRIX_HEADER.size + 4 * m * n
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}", offset=min(len(raw), expected))
    if n != block * block:
        raise FormatError(f"{path}: N={n} does not match block size {block}", offset=_MATRIX_HEADER.size - 4)
    matrix = np.frombuffer(raw, dtype="<f4", offset=_MATRIX_HEADER.size).reshape(m, n).astype(np.float64)
    matrix.setflags(write=False)
    return SamplingOperator(block=block, ratio=ratio, seed=seed, matrix=matrix)


def verify_operator(op: SamplingOperator, tol: float = 1e-5) -> float:
    """Max deviation of ``A A^T`` from the identity; raises past ``tol``."""
    gram = op.matrix @ op.matrix.T
    dev = float(np.abs(gram - np.eye(op.m)).max())
    if dev > tol:
        raise OperatorError(f"A A^T deviates from identity by {dev:.3g}", deviation=dev)
    return dev


def save_measurement(path: Union[str, Path], y: Measurement) -> None:
    c, h, w = y.shape
    m = y.values.shape[0]
    header = _MEASUREMENT_HEADER.pack(
        MEASUREMENT_MAGIC, FORMAT_VERSION, y.block, y.ratio, y.seed, m, y.block * y.block, c, h, w
    )
    Path(path).write_bytes(header + y.flat().astype("<f4").tobytes())


def load_measurement(path: Union[str, Path]) -> Measurement:
    raw = _read_file(path, "measurement")
    if len(raw) < _MEASUREMENT_HEADER.size:
        raise FormatError(f"{path}: truncated measurement header", offset=len(raw))
    magic, version, block, ratio, seed, m, n, c, h, w = _MEASUREMENT_HEADER.unpack_from(raw)
    if magic != MEASUREMENT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if n != block * block:
        raise FormatError(f"{path}: N={n} does not match block {block}", offset=30)
    if block < 1 or h % block or w % block:
        raise FormatError(f"{path}: image {h}x{w} does not tile with block {block}", offset=6)
    tiles = c * (h // block) * (w // block)
    expected = _MEASUREMENT_HEADER.size + 4 * m * tiles
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}", offset=min(len(raw), expected))
    flat = np.frombuffer(raw, dtype="<f4", offset=_MEASUREMENT_HEADER.size).astype(np.float32)
    values = np.ascontiguousarray(flat.reshape(tiles, m).T)
    return Measurement(values=values, shape=(c, h, w), block=block, ratio=ratio, seed=seed)
