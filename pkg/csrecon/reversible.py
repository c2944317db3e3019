"""Wired layer chains: additive couplings that can be run backwards.

A wired layer with transform ``F`` and coupling ``(u, v)``, ``u = 1 - v``, maps

    x' = u * F(x) + v * h
    h' = x

and is undone exactly by ``x = h'``, ``h = (x' - u * F(h')) / v``.

On a recompute tape a chain keeps only its two outputs. Backward walks the
layers in reverse: it rebuilds each layer's inputs from its outputs, replays
the layer once on a child tape and pushes the gradient through that replay.
Transforms may close over leaf tensors (parameters, constants) only.
"""
from __future__ import annotations

import logging
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .engine import RECOMPUTE, Tape, Tensor, current_tape, no_grad
from .errors import CouplingRangeError
from .functional import sigmoid
from .nn import Module, parameter

logger = logging.getLogger(__name__)

V_MIN = 0.05
V_MAX = 0.95


class Coupling(Module):
    """Learned mixing weight ``v`` kept in ``[V_MIN, V_MAX]`` through a sigmoid.

    ``pin(value)`` fixes ``v`` to any value (including ones outside the safe
    range, which the recompute path rejects).
    """

    def __init__(self, init: float = 0.5) -> None:
        frac = (init - V_MIN) / (V_MAX - V_MIN)
        self.logit = parameter(np.log(frac / (1.0 - frac)))
        self._pinned: Optional[float] = None

    def pin(self, value: Optional[float]) -> None:
        self._pinned = None if value is None else float(value)

    @property
    def pinned(self) -> Optional[float]:
        return self._pinned

    def pair(self) -> Tuple[Tensor, Tensor]:
        """(u, v) as tensors; differentiable unless pinned."""
        if self._pinned is not None:
            v = Tensor(np.asarray(self._pinned, dtype=self.logit.dtype))
        else:
            v = V_MIN + (V_MAX - V_MIN) * sigmoid(self.logit)
        return 1.0 - v, v

    def value(self) -> float:
        if self._pinned is not None:
            return self._pinned
        return float(V_MIN + (V_MAX - V_MIN) / (1.0 + np.exp(-float(self.logit.data))))


class WiredLayer(Protocol):
    coupling: Coupling

    def transform(self, x: Tensor) -> Tensor: ...


def wired_step(layer: WiredLayer, x: Tensor, h: Tensor) -> Tuple[Tensor, Tensor]:
    f = layer.transform(x)
    u, v = layer.coupling.pair()
    return u * f + v * h, x


def _check_range(v: float, where: str) -> None:
    if not v >= V_MIN:
        raise CouplingRangeError(f"coupling v={v:.4g} below the safe bound {V_MIN} in {where}", v=v)


def layer_inverse(layer: WiredLayer, x_out: Tensor, h_out: Tensor) -> Tuple[Tensor, Tensor]:
    """Numeric inverse of one wired layer (nothing is recorded)."""
    with no_grad():
        f = layer.transform(h_out)
        u, v = layer.coupling.pair()
    v_val = float(v.data)
    _check_range(v_val, "layer inverse")
    h_prev = (x_out.data - u.data * f.data) / v.data
    return h_out, Tensor(h_prev)


def chain_inverse(layers: Sequence[WiredLayer], x_out: Tensor, h_out: Tensor) -> Tuple[Tensor, Tensor]:
    for layer in reversed(list(layers)):
        x_out, h_out = layer_inverse(layer, x_out, h_out)
    return x_out, h_out


def chain_forward(layers: Sequence[WiredLayer], x: Tensor, h: Tensor) -> Tuple[Tensor, Tensor]:
    """Run ``layers`` in order on ``(x, h)``.

    Without a tape, or on a cached tape, this is plain composition. On a
    recompute tape the whole chain becomes a single node that retains only
    its outputs.
    """
    layers = list(layers)
    tape = current_tape()
    if tape is None or tape.mode != RECOMPUTE:
        for layer in layers:
            x, h = wired_step(layer, x, h)
        return x, h
    return _recorded_chain(tape, layers, x, h)


def _recorded_chain(tape: Tape, layers: List[WiredLayer], x: Tensor, h: Tensor) -> Tuple[Tensor, Tensor]:
    with no_grad():
        xo, ho = x, h
        for layer in layers:
            xo, ho = wired_step(layer, xo, ho)
    x_out, h_out = Tensor(xo.data), Tensor(ho.data)

    def grad_fn(saved: Tuple[np.ndarray, ...], grads: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        xs, hs = saved
        gx, gh = grads
        for layer in reversed(layers):
            replay = Tape(tape.mode, parent=tape)
            with replay:
                x_in = Tensor(hs, requires_grad=True)
                f = layer.transform(x_in)
                u, v = layer.coupling.pair()
                _check_range(float(v.data), "wired backward")
                h_prev = (xs - u.data * f.data) / v.data
                h_in = Tensor(h_prev, requires_grad=True)
                x_new = u * f + v * h_in
            g_x_in, g_h_in = replay.run_backward([x_new], [gx], watch=(x_in, h_in))
            gx = gh if g_x_in is None else g_x_in + gh
            gh = np.zeros_like(h_prev) if g_h_in is None else g_h_in
            xs, hs = hs, h_prev
        return gx, gh

    tape.record("wired_chain", (x, h), (x_out, h_out), (x_out.data, h_out.data), grad_fn)
    return x_out, h_out
