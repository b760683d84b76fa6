class PnlssError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PnlssError, ValueError):
    pass


class NumericalError(PnlssError, ArithmeticError):
    """A covariance could not be made positive definite, or a value diverged."""

    def __init__(self, message, timestep=None):
        if timestep is not None:
            message = f"{message} (at timestep {timestep})"
        super().__init__(message)
        self.timestep = timestep


class SchemaError(PnlssError, ValueError):
    """A model or dataset document failed validation on load."""
