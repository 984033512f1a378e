"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Input shapes disagree with the declared dimensions."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf.

    ``coordinate`` is the flat index of the first offending entry, or None when
    the failure is not tied to a single coordinate. ``tag`` is ``"diverged"``
    for overflow of an iterated update.
    """

    def __init__(self, message, coordinate=None, tag="diverged", step=None):
        super().__init__(message)
        self.coordinate = coordinate
        self.tag = tag
        self.step = step


class SingularMatrixError(NumericError):
    def __init__(self, message, condition):
        super().__init__(message, tag="singular")
        self.condition = condition


class CheckpointError(IOError):
    """Checkpoint file is missing, truncated, or from another format version."""
