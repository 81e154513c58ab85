"""Shared exception hierarchy. Every domain error raised by this package
derives from CodesignError so the CLI can map failures to exit code 1."""


class CodesignError(Exception):
    """Base class for all domain errors."""


class NonFiniteValue(CodesignError):
    """A numeric input was NaN or infinite where a finite real is required."""


class NonPositiveVolume(CodesignError):
    """Volume must be strictly positive to define efficiency."""


class MissingParameter(CodesignError):
    """A schema parameter is absent from a value map."""

    def __init__(self, names):
        self.names = tuple(names)
        super().__init__(f"missing parameter(s): {', '.join(self.names)}")
