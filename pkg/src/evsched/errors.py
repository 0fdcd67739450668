"""Exception types shared across the engine.

Exit-code mapping used by the CLI: ConfigError -> 2, the infeasibility
family -> 3, PropertyFailure -> 4. Everything else is a plain bug.
"""

from __future__ import annotations


class EvschedError(Exception):
    """Base class for engine errors."""


class ConfigError(EvschedError):
    """Bad or unknown configuration content."""


class EmptyPolytopeError(EvschedError):
    """An action polytope has no feasible point."""


class InfeasibleStageError(EvschedError):
    """Forward dispatch hit a slot with an empty tightened action set."""

    def __init__(self, slot: int, detail: str = ""):
        self.slot = slot
        msg = f"no feasible allocation at slot {slot}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class InfeasibleProblemError(EvschedError):
    """A hindsight or first-come schedule cannot satisfy its constraints."""

    def __init__(self, msg: str, slot: int | None = None):
        self.slot = slot
        super().__init__(msg)


class InstanceTooLargeError(EvschedError):
    """Exact solver guard tripped; the instance is beyond enumeration size."""


class FitError(EvschedError):
    """Regression failed (singular system or non-finite result)."""


class NonFiniteObjectiveError(EvschedError):
    """A value model returned NaN or infinity inside an optimization."""


class CheckpointError(EvschedError):
    """A value-model checkpoint is missing, corrupt, or incompatible."""


class PropertyFailureError(EvschedError):
    """A verification property did not hold."""
