"""Dense tensors recorded on an explicit tape.

While a :class:`Tape` is active, every differentiable op that touches a tensor
with ``requires_grad`` appends a node to it. A node keeps exactly the arrays
its backward needs; those arrays are the retained activations and the tape's
:class:`MemoryLedger` counts them byte for byte.

A tape is created in one of two modes:

``cached``
    every node keeps its saved arrays until backward reaches it.
``recompute``
    wired regions (see :mod:`csrecon.reversible`) keep only their outputs and
    rebuild their inputs and features layer by layer during backward.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import EngineError, NonFiniteError, ShapeError
from .utils import MASK64, derive_seed

logger = logging.getLogger(__name__)

CACHED = "cached"
RECOMPUTE = "recompute"
MODES = (CACHED, RECOMPUTE)

DTYPES = {"float32": np.float32, "float64": np.float64}

_local = threading.local()
_default_dtype: type = np.float32


# ==================== precision / active tape ====================

def get_default_dtype() -> type:
    return _default_dtype


def set_default_dtype(name: Union[str, type]) -> None:
    global _default_dtype
    _default_dtype = _resolve_dtype(name)


@contextmanager
def precision(name: Union[str, type]) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = _resolve_dtype(name)
    try:
        yield
    finally:
        _default_dtype = previous


def _resolve_dtype(name: Union[str, type]) -> type:
    if isinstance(name, str):
        if name not in DTYPES:
            raise EngineError(f"unsupported precision {name!r}; use float32 or float64")
        return DTYPES[name]
    dtype = np.dtype(name).type
    if dtype not in (np.float32, np.float64):
        raise EngineError(f"unsupported precision {name!r}")
    return dtype


def _stack() -> List[Optional["Tape"]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on any tape."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


# ==================== Tensor ====================

class Tensor:
    """N-d float array with a gradient slot.

    ``is_param`` marks tensors owned by a :class:`csrecon.nn.Module`; leaves are
    tensors no recorded op produced.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[Union[str, type]] = None,
        name: Optional[str] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=_resolve_dtype(dtype))
        elif isinstance(data, np.ndarray) and data.dtype.type in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.is_param = False
        self._node: Optional[Node] = None

    # --- introspection ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # --- arithmetic ---
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from .functional import matmul

        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def constant(data: Any, dtype: Optional[Union[str, type]] = None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def as_tensor(value: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype.type if like is not None else None
    return Tensor(value, dtype=dtype)


# ==================== memory ledger ====================

def _buffer_of(arr: np.ndarray) -> np.ndarray:
    buf = arr
    while isinstance(buf.base, np.ndarray):
        buf = buf.base
    return buf


class MemoryLedger:
    """Exact byte count of the buffers retained by live tape nodes.

    Views are charged to the buffer they view; a buffer retained by several
    nodes is charged once.
    """

    def __init__(self) -> None:
        self._refs: Dict[int, List[Any]] = {}
        self.live_bytes = 0
        self.peak_bytes = 0
        self.tapes: List["Tape"] = []

    @property
    def retained_count(self) -> int:
        return len(self._refs)

    def retain(self, arr: np.ndarray) -> None:
        buf = _buffer_of(arr)
        entry = self._refs.get(id(buf))
        if entry is None:
            self._refs[id(buf)] = [buf, 1]
            self.live_bytes += int(buf.nbytes)
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes
        else:
            entry[1] += 1

    def release(self, arr: np.ndarray) -> None:
        buf = _buffer_of(arr)
        entry = self._refs.get(id(buf))
        if entry is None:
            raise EngineError("ledger release of a buffer that was never retained")
        entry[1] -= 1
        if entry[1] == 0:
            del self._refs[id(buf)]
            self.live_bytes -= int(buf.nbytes)

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes


@dataclass
class MemoryReport:
    peak_bytes: int
    live_bytes: int
    retained_tensor_count: int


def memory_report(tape: Optional["Tape"]) -> MemoryReport:
    if tape is None:
        return MemoryReport(0, 0, 0)
    ledger = tape.ledger
    return MemoryReport(ledger.peak_bytes, ledger.live_bytes, ledger.retained_count)


def audit_ledger(tape: "Tape") -> MemoryReport:
    """Walk every live node and check the ledger against what they hold."""
    ledger = tape.ledger
    seen: Dict[int, np.ndarray] = {}
    for live in ledger.tapes:
        for node in live.nodes:
            for arr in node.counted:
                buf = _buffer_of(arr)
                seen[id(buf)] = buf
    total = sum(int(buf.nbytes) for buf in seen.values())
    if total != ledger.live_bytes or len(seen) != ledger.retained_count:
        raise EngineError(
            f"ledger drift: walker sees {total} bytes in {len(seen)} buffers, "
            f"ledger says {ledger.live_bytes} bytes in {ledger.retained_count}"
        )
    return MemoryReport(ledger.peak_bytes, total, len(seen))


# ==================== tape ====================

BackwardFn = Callable[[Tuple[np.ndarray, ...], Any], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("op", "inputs", "outputs", "saved", "counted", "backward_fn", "tape")

    def __init__(self, op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor],
                 saved: Tuple[np.ndarray, ...], counted: List[np.ndarray],
                 backward_fn: BackwardFn, tape: "Tape") -> None:
        self.op = op
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        self.saved: Optional[Tuple[np.ndarray, ...]] = saved
        self.counted = counted
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of ops plus the ledger of what they retain.

    Child tapes (used while a wired region recomputes itself) share the root's
    ledger and leaf-gradient buffer.
    """

    def __init__(self, mode: str = CACHED, *, parent: Optional["Tape"] = None) -> None:
        if mode not in MODES:
            raise EngineError(f"unknown tape mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.nodes: List[Node] = []
        if parent is None:
            self.root: Tape = self
            self.ledger = MemoryLedger()
            self.leaf_grads: Dict[int, List[Any]] = {}
        else:
            self.root = parent.root
            self.ledger = parent.ledger
            self.leaf_grads = parent.leaf_grads
        self.baseline_bytes = self.ledger.live_bytes
        self.recorded = False
        self.ledger.tapes.append(self)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise EngineError("tape stack corrupted")
        stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor],
               saved: Sequence[Union[Tensor, np.ndarray]], backward_fn: BackwardFn) -> Node:
        arrays: List[np.ndarray] = []
        counted: List[np.ndarray] = []
        for item in saved:
            if isinstance(item, Tensor):
                arrays.append(item.data)
                # leaves (parameters, constants) are not activations
                if item._node is not None:
                    counted.append(item.data)
            else:
                arrays.append(item)
                counted.append(item)
        node = Node(op, inputs, outputs, tuple(arrays), counted, backward_fn, self)
        for arr in counted:
            self.ledger.retain(arr)
        for out in outputs:
            out._node = node
            out.requires_grad = True
        self.nodes.append(node)
        self.recorded = True
        return node

    def _free(self, node: Node) -> None:
        for arr in node.counted:
            self.ledger.release(arr)
        node.counted = []
        node.saved = None

    def clear(self) -> None:
        """Drop every node without running backward."""
        for node in self.nodes:
            self._free(node)
        self.nodes.clear()
        self._detach()

    def _detach(self) -> None:
        if self in self.ledger.tapes:
            self.ledger.tapes.remove(self)

    def run_backward(self, roots: Sequence[Tensor], seeds: Sequence[Optional[np.ndarray]],
                     watch: Sequence[Tensor] = ()) -> List[Optional[np.ndarray]]:
        """Propagate ``seeds`` from ``roots`` back through this tape.

        Leaf gradients go to the shared root buffer; gradients of the
        ``watch`` tensors are returned instead.
        """
        if not self.nodes:
            raise EngineError("backward without a recorded forward pass")
        grads: Dict[int, np.ndarray] = {}
        for root, seed in zip(roots, seeds):
            if seed is None:
                continue
            if root._node is None or root._node.tape is not self:
                raise EngineError("backward root was not produced on this tape")
            grads[id(root)] = _accumulate(grads.get(id(root)), seed, root.data.dtype)
        watched = {id(t) for t in watch}
        for node in reversed(self.nodes):
            outs = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in outs):
                self._free(node)
                continue
            if len(outs) == 1:
                in_grads = node.backward_fn(node.saved, outs[0])
            else:
                filled = [g if g is not None else np.zeros_like(o.data) for g, o in zip(outs, node.outputs)]
                in_grads = node.backward_fn(node.saved, filled)
            self._free(node)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if not np.isfinite(g).all():
                    raise NonFiniteError(f"non-finite gradient flowing out of {node.op}", op=node.op)
                key = id(inp)
                if key in watched or (inp._node is not None and inp._node.tape is self):
                    grads[key] = _accumulate(grads.get(key), g, inp.data.dtype)
                elif inp._node is None:
                    entry = self.leaf_grads.get(key)
                    if entry is None:
                        self.leaf_grads[key] = [inp, np.array(g, dtype=inp.data.dtype)]
                    else:
                        entry[1] = entry[1] + g
                else:
                    raise EngineError(
                        f"{node.op} consumed a tensor recorded on an enclosing tape; "
                        "wired regions may only close over leaves"
                    )
        self.nodes.clear()
        self._detach()
        return [grads.get(id(t)) for t in watch]


def _accumulate(current: Optional[np.ndarray], g: np.ndarray, dtype: np.dtype) -> np.ndarray:
    g = np.asarray(g, dtype=dtype)
    return g if current is None else current + g


class Gradients:
    """Leaf gradients produced by one backward pass, in first-touch order."""

    def __init__(self, entries: Dict[int, List[Any]]) -> None:
        self._entries = entries

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._entries

    def get(self, tensor: Tensor) -> Optional[np.ndarray]:
        entry = self._entries.get(id(tensor))
        return None if entry is None else entry[1]

    def items(self) -> Iterator[Tuple[Tensor, np.ndarray]]:
        for tensor, grad in self._entries.values():
            yield tensor, grad


def backward(loss: Tensor, mode: Optional[str] = None, accumulate: bool = True) -> Gradients:
    """Reverse-mode pass from a scalar ``loss`` to every ``requires_grad`` leaf.

    ``mode`` must match the mode of the tape the forward pass was recorded on
    (activations freed at forward time cannot be brought back as cached ones).
    With ``accumulate`` the gradients are also added into ``leaf.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise EngineError("backward without a recorded forward pass")
    tape = node.tape
    if tape.root is not tape:
        raise EngineError("backward must start from a root tape")
    if mode is not None and mode != tape.mode:
        raise EngineError(f"forward was recorded in {tape.mode!r} mode, backward asked for {mode!r}")
    tape.leaf_grads.clear()
    tape.run_backward([loss], [np.ones_like(loss.data)])
    grads = Gradients(dict(tape.leaf_grads))
    tape.leaf_grads.clear()
    if accumulate:
        for leaf, grad in grads.items():
            leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
    if tape.ledger.live_bytes != tape.baseline_bytes:
        logger.warning("ledger did not return to baseline after backward: %d != %d",
                       tape.ledger.live_bytes, tape.baseline_bytes)
    return grads


# ==================== op plumbing ====================

def check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value", op=op)
    return arr


def emit(op: str, inputs: Sequence[Tensor], out: np.ndarray,
         saved: Sequence[Union[Tensor, np.ndarray]], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` in a tensor and record it if any input needs a gradient."""
    check_finite(op, out)
    result = Tensor(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, [result], saved, backward_fn)
    return result


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a: TensorLike, b: TensorLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


# ==================== elementwise and shape ops ====================

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return emit("add", (a, b), a.data + b.data, (),
                lambda saved, g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return emit("sub", (a, b), a.data - b.data, (),
                lambda saved, g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, y = saved
        return unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)

    return emit("mul", (a, b), a.data * b.data, (a, b), grad_fn)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, y = saved
        return unbroadcast(g / y, x.shape), unbroadcast(-g * x / (y * y), y.shape)

    return emit("div", (a, b), out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return emit("neg", (a,), -a.data, (), lambda saved, g: (-g,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return emit("reshape", (a,), out, (), lambda saved, g: (g.reshape(src),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {a.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return emit("permute", (a,), np.transpose(a.data, axes), (),
                lambda saved, g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index: Any) -> Tensor:
    src, dtype = a.shape, a.dtype

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return emit("getitem", (a,), np.array(a.data[index]), (), grad_fn)


def tsum(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def grad_fn(saved: Tuple[np.ndarray, ...], g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return emit("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (), grad_fn)


def mean(a: Tensor) -> Tensor:
    return tsum(a) * (1.0 / a.size)


# ==================== random numbers ====================

class Rng:
    """Seeded counter-based generator (Philox keyed directly by the seed)."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, tag: str) -> "Rng":
        return Rng(derive_seed(self.seed, tag))

    def normal(self, shape: Union[int, Sequence[int]], dtype: Optional[Union[str, type]] = None) -> np.ndarray:
        draw = self._gen.standard_normal(shape, dtype=np.float64)
        return draw.astype(_resolve_dtype(dtype) if dtype is not None else _default_dtype)

    def uniform(self, shape: Union[int, Sequence[int]], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size: Optional[Union[int, Sequence[int]]] = None) -> Any:
        return self._gen.integers(low, high, size=size)
