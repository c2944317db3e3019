"""Parameter containers.

A :class:`Module` owns parameters (leaf tensors flagged ``is_param``) and
child modules as plain attributes. Traversal follows attribute definition
order, so parameter names are stable across runs.
"""
from __future__ import annotations

import math
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .engine import Rng, Tensor, get_default_dtype
from .errors import CheckpointError
from .functional import conv2d


def parameter(data: Any, dtype: Optional[type] = None) -> Tensor:
    t = Tensor(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=True)
    t.is_param = True
    return t


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.is_param:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.is_param:
                        yield f"{name}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy arrays into matching parameters; returns the names that were missing."""
        missing: List[str] = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"parameter {name} has shape {p.shape}, stored {value.shape}")
            p.data = value.astype(p.dtype, copy=True)
        if strict and missing:
            raise CheckpointError(f"checkpoint is missing {len(missing)} parameters", missing=missing[:8])
        return missing

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    """Same-padded convolution with per-channel bias.

    ``zero`` starts both weight and bias at 0 (used for layers that must
    begin as a no-op); otherwise weights are LeCun-normal.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 rng: Optional[Rng] = None, zero: bool = False, gain: float = 1.0) -> None:
        self.stride = stride
        shape = (out_channels, in_channels, kernel, kernel)
        if zero or rng is None:
            self.weight = parameter(np.zeros(shape))
        else:
            std = gain / math.sqrt(in_channels * kernel * kernel)
            self.weight = parameter(rng.normal(shape) * std)
        self.bias = parameter(np.zeros((out_channels, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride) + self.bias
