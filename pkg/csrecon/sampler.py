"""T-step DDNM reconstruction with first-level wiring across steps.

Step ``t`` (``F_t``) runs three substeps with a single noise estimate::

    x0|t  = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
    xbar  = x0|t + A^T (y - A x0|t)
    x_t-1 = sqrt(abar_t-1) * xbar + sqrt(1 - abar_t-1) * eps

The wired framework threads an auxiliary stream through the steps:
``h_T = w_T * x_T``, ``(x_t-1, h_t-1) = (u_t F_t(x_t) + v_t h_t, x_t)`` and the
output is ``x_0 + w_0 * h_0``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import reversible
from .cs_operator import Measurement, SamplingOperator, rnd_project
from .engine import Rng, Tensor
from .errors import ConsistencyError, ScheduleError, ShapeError
from .estimator import EstimatorGraph, PhysicsContext
from .functional import sqrt
from .nn import Module, parameter
from .reversible import Coupling
from .schedule import DiffusionSchedule, init_estimate
from .utils import debug_checks_enabled

logger = logging.getLogger(__name__)

NoiseFn = Callable[[Tensor, int, PhysicsContext], Tensor]


def consistency_tolerance(x_bar: Tensor, op: SamplingOperator) -> float:
    """Allowed ``|A xbar - y|_inf``.

    The base bound is absolute (1e-5 at 32-bit, 1e-10 at 64-bit) for unit-scale
    data and blocks of at most 8x8. It is relaxed by ``max(1, |xbar|_inf)``,
    since rounding in ``A xbar`` grows with the estimate, and by ``sqrt(N / 64)``
    for larger blocks (``N = B^2``; a factor of 4 at B = 32).
    """
    base = 1e-5 if x_bar.dtype == np.float32 else 1e-10
    scale = max(1.0, float(np.abs(x_bar.data).max(initial=0.0)))
    return base * scale * max(1.0, np.sqrt(op.n / 64.0))


def check_consistency(x_bar: Tensor, physics: PhysicsContext, t: int) -> float:
    residual = physics.op.apply(Tensor(x_bar.data)).data - physics.y_tensor.data.astype(x_bar.dtype)
    dev = float(np.abs(residual).max(initial=0.0))
    tol = consistency_tolerance(x_bar, physics.op)
    if dev >= tol:
        raise ConsistencyError(f"step {t}: |A xbar - y|_inf = {dev:.3g} exceeds {tol:.3g}", step=t, deviation=dev)
    return dev


def ddnm_substeps(x_t: Tensor, t: int, op: SamplingOperator, y: Measurement,
                  schedule: DiffusionSchedule, estimator: NoiseFn,
                  physics: Optional[PhysicsContext] = None) -> Tensor:
    """One reverse step ``x_t -> x_{t-1}``; ``estimator`` is called exactly once."""
    if not 1 <= t <= schedule.steps:
        raise ScheduleError(f"step {t} outside 1..{schedule.steps}", step=t)
    if physics is None:
        physics = PhysicsContext.build(op, y, x_t.dtype)
    abar_t = schedule.alpha_bar_tensor(t)
    if float(abar_t.data) <= 0.0:
        raise ScheduleError(f"alpha_bar_{t} is zero", step=t)
    eps = estimator(x_t, t, physics)
    if eps.shape != x_t.shape:
        raise ShapeError(f"noise estimate has shape {eps.shape}, expected {x_t.shape}")
    x0 = (x_t - sqrt(1.0 - abar_t) * eps) / sqrt(abar_t)
    x_bar = rnd_project(op, x0, physics.y_tensor)
    if debug_checks_enabled():
        check_consistency(x_bar, physics, t)
    if t == 1:
        # alpha_bar_0 = 1: the noise term vanishes
        return x_bar
    abar_prev = schedule.alpha_bar_tensor(t - 1)
    return sqrt(abar_prev) * x_bar + sqrt(1.0 - abar_prev) * eps


@dataclass
class WiredStep:
    """``F_t`` with its coupling, bound to one reconstruction's physics."""

    t: int
    coupling: Coupling
    framework: "WiredFramework"
    physics: PhysicsContext

    def transform(self, x: Tensor) -> Tensor:
        fw = self.framework
        return ddnm_substeps(x, self.t, self.physics.op, self.physics.y, fw.schedule, fw.estimator,
                             physics=self.physics)


@dataclass
class Reconstruction:
    image: Tensor
    nfe: int
    seconds: float


class WiredFramework(Module):
    """Schedule, shared estimator and the per-step couplings.

    ``wired=False`` runs the plain composition ``F_1 o ... o F_T`` (couplings and
    boundary scalars unused).
    """

    def __init__(self, schedule: DiffusionSchedule, estimator: EstimatorGraph, wired: bool = True) -> None:
        self.schedule = schedule
        self.estimator = estimator
        self.couplings = [Coupling() for _ in range(schedule.steps)]
        self.w_T = parameter(1.0)
        self.w_0 = parameter(0.0)
        self.wired = wired

    @property
    def steps(self) -> int:
        return self.schedule.steps

    def coupling(self, t: int) -> Coupling:
        return self.couplings[t - 1]

    def wired_steps(self, physics: PhysicsContext) -> List[WiredStep]:
        """Layers in execution order ``F_T, ..., F_1``."""
        return [WiredStep(t, self.coupling(t), self, physics) for t in range(self.steps, 0, -1)]

    def physics(self, op: SamplingOperator, y: Measurement) -> PhysicsContext:
        return PhysicsContext.build(op, y, self.w_T.dtype)

    def reconstruct(self, op: SamplingOperator, y: Measurement, init: str = "backproj",
                    rng: Optional[Rng] = None) -> Reconstruction:
        started = time.perf_counter()
        physics = self.physics(op, y)
        x_T = init_estimate(self.schedule, op, y, mode=init, rng=rng)
        if self.wired:
            image = wired_forward(self, x_T, op, y, physics=physics)
        else:
            image = unwired_forward(self, x_T, op, y, physics=physics)
        return Reconstruction(image=image, nfe=physics.nfe, seconds=time.perf_counter() - started)


def wired_forward(fw: WiredFramework, x_T: Tensor, op: SamplingOperator, y: Measurement,
                  physics: Optional[PhysicsContext] = None) -> Tensor:
    physics = physics or fw.physics(op, y)
    h_T = fw.w_T * x_T
    x_0, h_0 = reversible.chain_forward(fw.wired_steps(physics), x_T, h_T)
    return x_0 + fw.w_0 * h_0


def wired_states(fw: WiredFramework, x_T: Tensor, op: SamplingOperator, y: Measurement,
                 physics: Optional[PhysicsContext] = None) -> Tuple[Tensor, Tensor]:
    """``(x_0, h_0)`` before the ``w_0`` merge."""
    physics = physics or fw.physics(op, y)
    return reversible.chain_forward(fw.wired_steps(physics), x_T, fw.w_T * x_T)


def wired_inverse(fw: WiredFramework, x_prev: Tensor, h_prev: Tensor, t: int, op: SamplingOperator,
                  y: Measurement, physics: Optional[PhysicsContext] = None) -> Tuple[Tensor, Tensor]:
    """Undo step ``t``: ``(x_{t-1}, h_{t-1}) -> (x_t, h_t)``."""
    if not 1 <= t <= fw.steps:
        raise ScheduleError(f"step {t} outside 1..{fw.steps}", step=t)
    physics = physics or fw.physics(op, y)
    return reversible.layer_inverse(WiredStep(t, fw.coupling(t), fw, physics), x_prev, h_prev)


def framework_inverse(fw: WiredFramework, x_0: Tensor, h_0: Tensor, op: SamplingOperator,
                      y: Measurement, physics: Optional[PhysicsContext] = None) -> Tuple[Tensor, Tensor]:
    """``(x_0, h_0) -> (x_T, h_T)`` through every step."""
    physics = physics or fw.physics(op, y)
    return reversible.chain_inverse(fw.wired_steps(physics), x_0, h_0)


def unwired_forward(fw: WiredFramework, x_T: Tensor, op: SamplingOperator, y: Measurement,
                    physics: Optional[PhysicsContext] = None) -> Tensor:
    physics = physics or fw.physics(op, y)
    x = x_T
    for step in fw.wired_steps(physics):
        x = step.transform(x)
    return x


def identity_framework(image_channels: int = 1, steps: int = 1) -> WiredFramework:
    """Unwired sampler around an untrained estimator whose output is exactly zero.

    Reconstruction then reduces to back-projection followed by range-null-space
    projection, which is exact when the operator is square.
    """
    estimator = EstimatorGraph(image_channels, channels=[8], blocks_per_group=1, injectors=False, wired=False)
    return WiredFramework(DiffusionSchedule(steps), estimator, wired=False)
