"""Exception hierarchy shared by all modules."""


class DiffuseError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class DimensionError(DiffuseError, ValueError):
    """Array shapes do not line up."""


class ParameterError(DiffuseError, ValueError):
    """A scalar argument is outside its valid range."""


class DataError(DiffuseError, ValueError):
    """A dataset is empty, mixed-shape or otherwise unusable."""


class FormatError(DiffuseError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class TrainingError(DiffuseError, RuntimeError):
    """Training diverged."""

    exit_code = 3

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class ConsistencyError(DiffuseError, RuntimeError):
    """An internal numerical invariant was violated."""

    exit_code = 3
