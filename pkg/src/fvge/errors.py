"""Exception hierarchy shared across the engine."""


class FvgeError(Exception):
    """Base class for all engine errors."""


class ConfigError(FvgeError, ValueError):
    """Invalid hyperparameter, toggle, or option combination."""


class ShapeError(FvgeError, ValueError):
    """Mismatched or empty array shapes."""


class DomainError(FvgeError, ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateInputError(FvgeError, ValueError):
    """Input too ill-conditioned to process (e.g. near-zero norm)."""


class TrainingDivergedError(FvgeError, RuntimeError):
    """Non-finite loss or gradient encountered during optimization.

    ``last_checkpoint`` carries the most recent healthy state when the
    trainer can provide one.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class FormatError(FvgeError, ValueError):
    """Malformed dataset or checkpoint file."""


class ValidationError(FvgeError, ValueError):
    """Well-formed file whose contents violate a dataset invariant."""
