"""Exception types shared across the package."""


class ScribvolError(Exception):
    """Base class for all scribvol errors."""


class FormatError(ScribvolError):
    """A .svol/.scrib file is missing, truncated, or malformed."""


class ValidationError(ScribvolError):
    """A domain-type invariant was violated at construction time."""


class DimsMismatchError(ScribvolError):
    """Two objects that must share a grid have different dims or spacing."""


class DegenerateRegionError(ScribvolError):
    """A region reduction collapsed (e.g. empty inside/outside mass)."""


class SingularSystemError(ScribvolError):
    """A linear system has no unique solution (seedless component)."""


class StageError(ScribvolError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
