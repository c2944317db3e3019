"""Error types shared by every csrecon module.

Each error carries a short machine code and a human readable detail. The CLI
prints ``to_dict()`` as one JSON line on stderr.
"""
from __future__ import annotations

from typing import Any, Dict, Optional


class ReconError(Exception):
    """Base class. ``code`` is stable and machine-parsable."""

    code = "recon_error"

    def __init__(self, detail: str, **extra: Any) -> None:
        super().__init__(detail)
        self.detail = detail
        self.extra: Dict[str, Any] = extra

    def to_dict(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {"error": self.code, "detail": self.detail}
        payload.update(self.extra)
        return payload


class ShapeError(ReconError):
    code = "shape_mismatch"


class NonFiniteError(ReconError):
    code = "non_finite"


class EngineError(ReconError):
    code = "engine"


class OperatorError(ReconError):
    code = "operator"


class ScheduleError(ReconError):
    code = "schedule"


class CouplingRangeError(ReconError):
    code = "coupling_range"


class ConsistencyError(ReconError):
    code = "measurement_consistency"


class ConfigError(ReconError):
    code = "config"


class FormatError(ReconError):
    code = "format"

    def __init__(self, detail: str, offset: Optional[int] = None, **extra: Any) -> None:
        if offset is not None:
            extra["offset"] = offset
        super().__init__(detail, **extra)
        self.offset = offset


class CheckpointError(ReconError):
    code = "checkpoint"


class TrainingDivergedError(ReconError):
    code = "diverged"
