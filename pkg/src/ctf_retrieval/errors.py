"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not match what an operation requires."""


class InvalidInputError(ValueError):
    """An input violates an operation's precondition."""


class ConfigError(ValueError):
    """A configuration document or flag override is invalid."""


class FormatError(ValueError):
    """An on-disk artifact is malformed, truncated or of the wrong version."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""
