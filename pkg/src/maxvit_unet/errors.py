"""Exception types shared across the package.

The CLI maps each class to its own exit code, so raise the most specific one.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, message: str, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


class NumericError(FloatingPointError):
    """A NaN or infinity showed up where finite numbers are required."""


class GradCheckError(AssertionError):
    """Analytic and numeric gradients disagree beyond tolerance."""
