"""Differentiable array ops built on :mod:`csrecon.engine`.

Images are channel-first ``(C, H, W)`` arrays without a batch axis; a batch
is a Python list of images.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np
from scipy.special import expit

from .engine import Tensor, emit
from .errors import ShapeError


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, y = saved
        return g @ y.T, x.T @ g

    return emit("matmul", (a, b), a.data @ b.data, (a, b), grad_fn)


# ==================== convolution ====================

def _conv_geometry(shape: Tuple[int, ...], k: int, stride: int) -> Tuple[int, int, int]:
    _, h, w = shape
    return k // 2, (h - 1) // stride + 1, (w - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """'Same' cross-correlation of ``x (Ci,H,W)`` with ``weight (Co,Ci,k,k)``.

    ``k`` must be odd; ``stride`` 2 halves the spatial size (rounding up).
    Only ``x`` and ``weight`` are kept for backward; the padded copy is rebuilt.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects x (C,H,W) and w (O,C,k,k), got {x.shape}, {weight.shape}")
    co, ci, k, k2 = weight.shape
    if ci != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    pad, ho, wo = _conv_geometry(x.shape, k, stride)
    rows = stride * (ho - 1) + 1
    cols = stride * (wo - 1) + 1

    def windows():
        for dy in range(k):
            for dx in range(k):
                yield dy, dx, (slice(None), slice(dy, dy + rows, stride), slice(dx, dx + cols, stride))

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((co, ho, wo), dtype=np.result_type(x.data, weight.data))
    for dy, dx, sl in windows():
        out += np.tensordot(weight.data[:, :, dy, dx], xp[sl], axes=(1, 0))

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xs, ws = saved
        padded = np.pad(xs, ((0, 0), (pad, pad), (pad, pad)))
        g_padded = np.zeros_like(padded)
        g_w = np.zeros_like(ws)
        for dy, dx, sl in windows():
            g_w[:, :, dy, dx] = np.tensordot(g, padded[sl], axes=([1, 2], [1, 2]))
            g_padded[sl] += np.tensordot(ws[:, :, dy, dx], g, axes=(0, 0))
        h, w = xs.shape[1:]
        return g_padded[:, pad:pad + h, pad:pad + w], g_w

    return emit("conv2d", (x, weight), out, (x, weight), grad_fn)


# ==================== resampling ====================

def _shuffle(arr: np.ndarray, r: int) -> np.ndarray:
    c, h, w = arr.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}, got {c}")
    out = arr.reshape(c // (r * r), r, r, h, w).transpose(0, 3, 1, 4, 2)
    return out.reshape(c // (r * r), h * r, w * r)


def _unshuffle(arr: np.ndarray, r: int) -> np.ndarray:
    c, h, w = arr.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle needs H, W divisible by {r}, got {h}x{w}")
    out = arr.reshape(c, h // r, r, w // r, r).transpose(0, 2, 4, 1, 3)
    return out.reshape(c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(C*r^2, H, W) -> (C, H*r, W*r); channel ``c*r^2 + dy*r + dx`` lands at offset (dy, dx)."""
    if r == 1:
        return x
    return emit("pixel_shuffle", (x,), _shuffle(x.data, r), (), lambda saved, g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    if r == 1:
        return x
    return emit("pixel_unshuffle", (x,), _unshuffle(x.data, r), (), lambda saved, g: (_shuffle(g, r),))


def upsample_nearest(x: Tensor, scale: int = 2) -> Tensor:
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=1), scale, axis=2)

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(c, h, scale, w, scale).sum(axis=(2, 4)),)

    return emit("upsample_nearest", (x,), out, (), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), (), grad_fn)


# ==================== pointwise ====================

def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return emit("sigmoid", (x,), out, (out,), lambda saved, g: (g * saved[0] * (1.0 - saved[0]),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray]:
        (xs,) = saved
        sig = expit(xs)
        return (g * (sig + xs * sig * (1.0 - sig)),)

    return emit("silu", (x,), x.data * s, (x,), grad_fn)


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray]:
        with np.errstate(divide="ignore"):
            return (g / (2.0 * saved[0]),)

    return emit("sqrt", (x,), out, (out,), grad_fn)


def absolute(x: Tensor) -> Tensor:
    return emit("abs", (x,), np.abs(x.data), (x,), lambda saved, g: (g * np.sign(saved[0]),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray]:
        (p,) = saved
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return emit("softmax", (x,), out, (out,), grad_fn)


def cumprod(x: Tensor) -> Tensor:
    """Running product of a 1-D tensor; entries must be non-zero for backward."""
    if x.ndim != 1:
        raise ShapeError(f"cumprod expects a vector, got shape {x.shape}")
    out = np.cumprod(x.data)

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray]:
        xs, prods = saved
        tail = np.cumsum((g * prods)[::-1])[::-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            return (tail / xs,)

    return emit("cumprod", (x,), out, (x, out), grad_fn)


def square(x: Tensor) -> Tensor:
    return emit("square", (x,), x.data * x.data, (x,), lambda saved, g: (2.0 * g * saved[0],))
