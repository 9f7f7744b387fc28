"""Exception hierarchy shared by every stage."""


class MocapError(Exception):
    """Base class for all package errors."""


class ValidationError(MocapError, ValueError):
    """Input violates a documented precondition (shape, domain, schema)."""


class ProjectionError(MocapError, ValueError):
    """A point sits at or behind the camera plane."""


class DegenerateGeometryError(MocapError):
    """Geometry is numerically degenerate (parallel rays, singular normal equations)."""


class UnderconstrainedError(MocapError):
    """Not enough observations survive to determine the unknowns."""


class UndefinedStatisticError(MocapError, ValueError):
    """A statistic was requested on too few samples."""


class DivergenceError(MocapError):
    """An optimizer diverged. ``trace`` holds the objective history."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class SchemaError(ValidationError):
    """Archive or config does not match the expected schema/version."""


class StageError(MocapError):
    """A pipeline stage failed; names the stage and the offending record."""

    def __init__(self, stage, record, cause):
        super().__init__(f"stage '{stage}' failed on record '{record}': {cause}")
        self.stage = stage
        self.record = record
        self.cause = cause
