"""Toy U-Net noise estimator with wired block groups and physics injectors.

Layout for ``channels=(16, 32)`` and a ``c``-channel image::

    stem 3x3 c->16
    down group   (16 ch, r=1)  --------------------------- skip
    stride-2 conv 16->32                                     |
    middle group (32 ch, r=2) [+ optional self-attention]    |
    nearest x2 + conv 32->16  + <----------------------------+
    up group     (16 ch, r=1)
    silu, head 3x3 16->c (zero-initialized)

Every group holds equidimensional blocks wired into one chain with its own
auxiliary stream: ``h = w * x`` on entry, ``x + w0 * h`` on exit. An injector
follows each block and mixes ``[f, A^T A f, A^T y]`` back into the feature.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import reversible
from .cs_operator import Measurement, SamplingOperator, back_project
from .engine import Rng, Tensor
from .errors import ShapeError
from .functional import concat, pixel_shuffle, pixel_unshuffle, silu, softmax, upsample_nearest
from .nn import Conv2d, Module, parameter
from .reversible import Coupling

logger = logging.getLogger(__name__)


@dataclass
class PhysicsContext:
    """Measurement physics one reconstruction is conditioned on.

    Holds only constants, so wired regions may close over it. ``nfe`` counts
    estimator evaluations, replays during backward included.
    """

    op: SamplingOperator
    y: Measurement
    y_tensor: Tensor
    aty: Tensor
    nfe: int = field(default=0)

    @classmethod
    def build(cls, op: SamplingOperator, y: Measurement, dtype: np.dtype) -> "PhysicsContext":
        aty = back_project(op, y)
        return cls(op=op, y=y, y_tensor=y.tensor(dtype), aty=Tensor(aty.data.astype(dtype, copy=False)))

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.y.shape


# ==================== building blocks ====================

class ResBlock(Module):
    """``x + conv2(silu(conv1(silu(x))))``; the inner width is ``expansion`` times the outer."""

    def __init__(self, channels: int, rng: Rng, expansion: int = 4) -> None:
        inner = channels * expansion
        self.conv1 = Conv2d(channels, inner, rng=rng.derive("conv1"))
        self.conv2 = Conv2d(inner, channels, rng=rng.derive("conv2"), gain=0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(silu(self.conv1(silu(x))))


class AttentionBlock(Module):
    """Single-head spatial self-attention with 1x1 projections."""

    def __init__(self, channels: int, rng: Rng) -> None:
        self.channels = channels
        self.query = Conv2d(channels, channels, kernel=1, rng=rng.derive("q"))
        self.key = Conv2d(channels, channels, kernel=1, rng=rng.derive("k"))
        self.value = Conv2d(channels, channels, kernel=1, rng=rng.derive("v"))
        self.proj = Conv2d(channels, channels, kernel=1, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        q = self.query(x).reshape(c, h * w)
        k = self.key(x).reshape(c, h * w)
        v = self.value(x).reshape(c, h * w)
        scores = q.permute(1, 0) @ k * (1.0 / np.sqrt(c))
        attn = softmax(scores, axis=-1)
        mixed = (v @ attn.permute(1, 0)).reshape(c, h, w)
        return x + self.proj(mixed)


class Injector(Module):
    """Residual physics fusion for a ``(C, H/r, W/r)`` feature.

    ``f = conv1(shuffle(F, r))`` lives in image space; ``conv2`` maps
    ``[f, A^T A f, A^T y]`` back to ``C / r^2`` channels, which unshuffle to ``C``.
    ``conv2`` starts at zero so a fresh injector is the identity.
    """

    def __init__(self, channels: int, ratio: int, image_channels: int, rng: Rng) -> None:
        if channels % (ratio * ratio):
            raise ShapeError(f"injector needs channels divisible by r^2={ratio * ratio}, got {channels}")
        self.ratio = ratio
        spread = channels // (ratio * ratio)
        self.conv1 = Conv2d(spread, image_channels, rng=rng.derive("conv1"))
        self.conv2 = Conv2d(3 * image_channels, spread, zero=True)

    def __call__(self, feature: Tensor, physics: PhysicsContext) -> Tensor:
        up = pixel_shuffle(feature, self.ratio)
        if up.shape[1:] != physics.image_shape[1:]:
            raise ShapeError(
                f"injector at r={self.ratio} sees a {up.shape[1]}x{up.shape[2]} map, "
                f"image is {physics.image_shape[1]}x{physics.image_shape[2]}"
            )
        f = self.conv1(up)
        mixed = concat([f, physics.op.project_range(f), physics.aty], axis=0)
        return feature + pixel_unshuffle(self.conv2(mixed), self.ratio)


def inject(inj: Injector, feature: Tensor, op: SamplingOperator, y: Measurement) -> Tensor:
    return inj(feature, PhysicsContext.build(op, y, feature.dtype))


class WiredBlock(Module):
    """One block of a group: body, optional injector, and its coupling."""

    def __init__(self, body: Module, injector: Optional[Injector]) -> None:
        self.body = body
        self.injector = injector
        self.coupling = Coupling()

    def bind(self, physics: PhysicsContext) -> "_BoundBlock":
        return _BoundBlock(self, physics)

    def apply(self, x: Tensor, physics: PhysicsContext) -> Tensor:
        out = self.body(x)
        if self.injector is not None:
            out = self.injector(out, physics)
        return out


class _BoundBlock:
    """A block with its physics attached, in the shape ``chain_forward`` wants."""

    def __init__(self, block: WiredBlock, physics: PhysicsContext) -> None:
        self.block = block
        self.physics = physics
        self.coupling = block.coupling

    def transform(self, x: Tensor) -> Tensor:
        return self.block.apply(x, self.physics)


class BlockGroup(Module):
    def __init__(self, blocks: Sequence[WiredBlock], wired: bool = True) -> None:
        self.blocks = list(blocks)
        self.wired = wired
        self.w_in = parameter(1.0)
        self.w_out = parameter(0.0)

    def bound(self, physics: PhysicsContext) -> List[_BoundBlock]:
        return [b.bind(physics) for b in self.blocks]

    def __call__(self, x: Tensor, physics: PhysicsContext) -> Tensor:
        if not self.wired:
            for block in self.blocks:
                x = block.apply(x, physics)
            return x
        h = self.w_in * x
        x, h = reversible.chain_forward(self.bound(physics), x, h)
        return x + self.w_out * h


def group_forward(group: BlockGroup, x: Tensor, h: Tensor, physics: PhysicsContext) -> Tuple[Tensor, Tensor]:
    return reversible.chain_forward(group.bound(physics), x, h)


def group_inverse(group: BlockGroup, x_out: Tensor, h_out: Tensor, physics: PhysicsContext) -> Tuple[Tensor, Tensor]:
    return reversible.chain_inverse(group.bound(physics), x_out, h_out)


# ==================== estimator ====================

class EstimatorGraph(Module):
    def __init__(
        self,
        image_channels: int = 1,
        channels: Sequence[int] = (16, 32),
        blocks_per_group: int = 2,
        expansion: int = 4,
        injectors: bool = True,
        attention: bool = False,
        wired: bool = True,
        rng: Optional[Rng] = None,
    ) -> None:
        rng = rng or Rng(0)
        channels = list(channels)
        if not channels:
            raise ShapeError("estimator needs at least one scale")
        self.image_channels = image_channels
        self.channel_plan = channels
        self.scales = len(channels)
        self.injectors = injectors

        def group(scale: int, tag: str, with_attention: bool = False) -> BlockGroup:
            c, r = channels[scale], 2 ** scale
            blocks = []
            for i in range(blocks_per_group):
                brng = rng.derive(f"{tag}.{i}")
                inj = Injector(c, r, image_channels, brng.derive("inj")) if injectors else None
                blocks.append(WiredBlock(ResBlock(c, brng, expansion), inj))
            if with_attention:
                arng = rng.derive(f"{tag}.attn")
                inj = Injector(c, r, image_channels, arng.derive("inj")) if injectors else None
                blocks.append(WiredBlock(AttentionBlock(c, arng), inj))
            return BlockGroup(blocks, wired=wired)

        self.stem = Conv2d(image_channels, channels[0], rng=rng.derive("stem"))
        self.down = [group(s, f"down{s}") for s in range(self.scales - 1)]
        self.downsample = [
            Conv2d(channels[s], channels[s + 1], stride=2, rng=rng.derive(f"downsample{s}"))
            for s in range(self.scales - 1)
        ]
        self.middle = group(self.scales - 1, "middle", with_attention=attention)
        self.upsample = [
            Conv2d(channels[s + 1], channels[s], rng=rng.derive(f"upsample{s}"))
            for s in reversed(range(self.scales - 1))
        ]
        self.up = [group(s, f"up{s}") for s in reversed(range(self.scales - 1))]
        self.head = Conv2d(channels[0], image_channels, zero=True)

    def groups(self) -> List[BlockGroup]:
        return [*self.down, self.middle, *self.up]

    def set_wired(self, wired: bool) -> None:
        for g in self.groups():
            g.wired = wired

    def injector_parameter_count(self) -> int:
        return sum(
            b.injector.parameter_count()
            for g in self.groups()
            for b in g.blocks
            if b.injector is not None
        )

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[0] != self.image_channels:
            raise ShapeError(f"estimator expects ({self.image_channels}, H, W), got {x.shape}")
        step = 2 ** (self.scales - 1)
        if x.shape[1] % step or x.shape[2] % step:
            raise ShapeError(f"image {x.shape[1]}x{x.shape[2]} must be divisible by {step}")

    def __call__(self, x: Tensor, t: int, physics: PhysicsContext) -> Tensor:
        self.check_input(x)
        physics.nfe += 1
        feat = self.stem(x)
        skips = []
        for group, down in zip(self.down, self.downsample):
            feat = group(feat, physics)
            skips.append(feat)
            feat = down(feat)
        feat = self.middle(feat, physics)
        for group, conv in zip(self.up, self.upsample):
            feat = conv(upsample_nearest(feat)) + skips.pop()
            feat = group(feat, physics)
        return self.head(silu(feat))


def estimate_noise(g: EstimatorGraph, x_t: Tensor, t: int, op: SamplingOperator, y: Measurement) -> Tensor:
    return g(x_t, t, PhysicsContext.build(op, y, x_t.dtype))
