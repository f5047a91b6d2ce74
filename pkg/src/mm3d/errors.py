"""Exception types shared across the package.

The CLI maps these onto exit codes: config problems -> 2, data problems -> 3,
numeric failures -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config document."""


class PlyParseError(ValueError):
    """Malformed PLY input. Carries the 1-based line number of the offender."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DegenerateSceneError(ValueError):
    """Scene too small for the requested operation (KNN, grouping, masking)."""


class ShapeError(ValueError):
    """Tensor shape mismatch in a differentiable primitive."""


class ContractError(ValueError):
    """Caller violated an API precondition (bad sizes, empty sets, and so on)."""


class NumericError(ArithmeticError):
    """Non-finite value produced where finiteness is contractual."""


class CheckpointError(ValueError):
    """Unreadable, truncated, or version-incompatible checkpoint file."""
