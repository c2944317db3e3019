"""Learnable per-step diffusion schedule.

Each step owns ``alpha_t = 0.01 + 0.99 * sigmoid(theta_t)`` so it always lies
in (0.01, 1.0); ``alpha_bar_t`` is the running product with ``alpha_bar_0 = 1``.
"""
from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np

from .cs_operator import Measurement, SamplingOperator, back_project
from .engine import Rng, Tensor, as_tensor
from .errors import ScheduleError
from .functional import cumprod, sigmoid, sqrt
from .nn import Module, parameter

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 0.01
MAX_STEPS = 12
INIT_MODES = ("backproj", "noise")


class DiffusionSchedule(Module):
    def __init__(self, steps: int = 3, init_alpha: float = 0.5) -> None:
        if not 1 <= steps <= MAX_STEPS:
            raise ScheduleError(f"T must be in 1..{MAX_STEPS}, got {steps}")
        if not ALPHA_FLOOR < init_alpha < 1.0:
            raise ScheduleError(f"initial alpha must be in ({ALPHA_FLOOR}, 1), got {init_alpha}")
        self.steps = steps
        frac = (init_alpha - ALPHA_FLOOR) / (1.0 - ALPHA_FLOOR)
        self.alpha_logits = parameter(np.full(steps, np.log(frac / (1.0 - frac))))
        self._pinned: Optional[np.ndarray] = None

    def pin(self, alphas: Optional[Sequence[float]]) -> None:
        """Fix alpha_1..alpha_T to literal values in (0, 1] (bypasses the learnable map)."""
        if alphas is None:
            self._pinned = None
            return
        values = np.asarray(alphas, dtype=np.float64)
        if values.shape != (self.steps,):
            raise ScheduleError(f"expected {self.steps} alphas, got shape {values.shape}")
        if np.any(values <= 0.0) or np.any(values > 1.0):
            raise ScheduleError("pinned alphas must lie in (0, 1]")
        self._pinned = values

    def alphas(self) -> Tensor:
        if self._pinned is not None:
            return Tensor(self._pinned.astype(self.alpha_logits.dtype))
        return ALPHA_FLOOR + (1.0 - ALPHA_FLOOR) * sigmoid(self.alpha_logits)

    def alpha_bars(self) -> Tensor:
        """``alpha_bar_1 .. alpha_bar_T`` as one vector."""
        return cumprod(self.alphas())

    def alpha_bar_tensor(self, t: int) -> Tensor:
        self._check_step(t)
        if t == 0:
            return Tensor(np.asarray(1.0, dtype=self.alpha_logits.dtype))
        return self.alpha_bars()[t - 1]

    def _check_step(self, t: int) -> None:
        if not 0 <= t <= self.steps:
            raise ScheduleError(f"step {t} outside 0..{self.steps}", step=t)


def alpha_bar(schedule: DiffusionSchedule, t: int) -> float:
    return schedule.alpha_bar_tensor(t).item()


def init_estimate(schedule: DiffusionSchedule, op: SamplingOperator, y: Measurement,
                  mode: str = "backproj", rng: Optional[Rng] = None) -> Tensor:
    """Starting point of the reverse process.

    ``backproj``: ``sqrt(alpha_bar_T) * A^T y`` (deterministic).
    ``noise``: a standard normal draw from ``rng``.
    """
    if mode == "backproj":
        coeff = sqrt(schedule.alpha_bar_tensor(schedule.steps))
        base = back_project(op, y)
        return coeff * as_tensor(base.data.astype(coeff.dtype, copy=False))
    if mode == "noise":
        if rng is None:
            raise ScheduleError("noise initialization needs an Rng")
        return Tensor(rng.normal(y.shape, dtype=schedule.alpha_logits.dtype))
    raise ScheduleError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")


def forward_noising(schedule: DiffusionSchedule, x0: Tensor, t: int, rng: Optional[Rng] = None,
                    eps: Optional[np.ndarray] = None) -> Tensor:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with ``eps`` drawn from ``rng`` unless given."""
    schedule._check_step(t)
    if t == 0:
        return x0
    if eps is None:
        if rng is None:
            raise ScheduleError("forward_noising needs an Rng or an explicit eps")
        eps = rng.normal(x0.shape, dtype=x0.dtype.type)
    abar = schedule.alpha_bar_tensor(t)
    return sqrt(abar) * x0 + sqrt(1.0 - abar) * Tensor(np.asarray(eps, dtype=x0.dtype))
