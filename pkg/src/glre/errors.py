"""Exception types shared across the package.

Contract violations (bad shapes, bad parameters, unusable data) derive from
ValueError; state-machine misuse derives from RuntimeError. The CLI maps the
former to exit code 1 and file/format problems to exit code 2.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its legal range."""


class DegenerateRowError(ValueError):
    """A row has (near-)zero norm where a direction is required."""

    def __init__(self, row: int, norm: float):
        self.row = row
        self.norm = norm
        super().__init__(f"row {row} has near-zero norm {norm:.3e} (threshold 1e-12)")


class NonScalarLossError(ValueError):
    """backward() was handed a non-scalar tensor."""


class TapeStateError(RuntimeError):
    """A gradient tape was replayed twice without a reset."""


class VocabularyError(ValueError):
    """A token id or token string falls outside the experiment vocabulary."""


class FormatError(ValueError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConsistencyError(ValueError):
    """Records inside one file disagree on a global property (e.g. dimension)."""


class VersionError(ValueError):
    """A versioned file was written by an incompatible format revision."""


class TrainingDivergenceError(RuntimeError):
    """A gradient became non-finite during optimization."""

    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient for parameter '{param_name}'")


class InsufficientDataError(ValueError):
    """The dataset is too small for the requested operation."""


class SplitSizeError(ValueError):
    """Requested split sizes exceed the available records."""

    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        super().__init__(f"requested {requested} records but only {available} are available")


class UndefinedAucError(ValueError):
    """AUC is undefined because only one label class is present."""
