"""Exception hierarchy shared by the pose-tracking modules.

Every error the package raises itself derives from :class:`PoseTrackingError`.
Most also derive from the matching builtin, e.g. ``ValueError``.
"""

from typing import Any, Optional, Tuple


class PoseTrackingError(Exception):
    """Base class for all errors raised by the package."""


class NonUnitInputError(PoseTrackingError, ValueError):
    """A quaternion or dual quaternion violates its unit-norm invariants."""


class StepTooLargeError(PoseTrackingError, ValueError):
    """An integration step exceeds the supported maximum."""


class OutOfRangeError(PoseTrackingError, ValueError):
    """A time or parameter lies outside the admissible range."""


class InvalidInputError(PoseTrackingError, ValueError):
    """Malformed data handed to a dataset or model."""


class InvalidConfidenceError(PoseTrackingError, ValueError):
    """A confidence level is not inside the open interval (0, 1)."""


class FactorizationFailureError(PoseTrackingError, ArithmeticError):
    """The Gram matrix stayed indefinite after the maximum jitter."""


class ConfigError(PoseTrackingError, ValueError):
    """An experiment configuration could not be read or resolved."""


class SchemaMismatchError(PoseTrackingError, ValueError):
    """A stored artifact does not match the expected schema or version."""


class EpisodeRuntimeError(PoseTrackingError, RuntimeError):
    """A failure inside the simulation loop, annotated with the tick."""

    def __init__(self, message: str, tick: int, t: float, seed: Optional[int] = None):
        self.message = message
        self.tick = tick
        self.t = t
        self.seed = seed
        where = f"tick {tick} (t={t:.3f} s)"
        if seed is not None:
            where = f"seed {seed}, {where}"
        super().__init__(f"{message} at {where}")

    def __reduce__(self) -> Tuple[Any, ...]:
        return type(self), (self.message, self.tick, self.t, self.seed)
