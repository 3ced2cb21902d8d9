"""Exception hierarchy shared by the engine, the harness and the CLI."""


class DartError(Exception):
    """Base class for every error raised by the application."""

    exit_code = 1


class ConfigError(DartError, ValueError):
    """Malformed or inconsistent configuration."""

    exit_code = 2

    def __init__(self, message, field=None):
        self.field = field
        if field and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class ValidationError(DartError, ValueError):
    """Invalid input data (duplicate tokens, empty inputs, bad lengths)."""

    exit_code = 2


class ShapeError(DartError, ValueError):
    """Tensor dimensions do not agree."""


class LengthError(DartError, ValueError):
    """Sequence longer than the model accepts."""


class CapacityError(DartError, ValueError):
    """Not enough reserved ids or examples to satisfy a request."""

    exit_code = 2


class ContractError(DartError, RuntimeError):
    """An API precondition was violated by the caller."""


class NumericError(DartError, ArithmeticError):
    """Non-finite values appeared in a computation."""

    exit_code = 3


class ArtifactMismatchError(DartError, ValueError):
    """A checkpoint does not match the vocabulary, task or prompt it is used with."""

    exit_code = 4


class ProtocolError(DartError, RuntimeError):
    """The evaluation protocol was broken (e.g. test set read twice)."""


def exit_code_for(exc):
    """
    Map an exception to the CLI exit-code contract.

    Args:
        exc (BaseException): Raised exception

    Returns:
        int: 2 config error, 3 numeric failure, 4 artifact mismatch, 1 otherwise
    """
    if isinstance(exc, DartError):
        return exc.exit_code
    return 1
