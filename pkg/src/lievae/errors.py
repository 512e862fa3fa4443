"""Exception taxonomy shared across the package.

The command line maps these onto exit codes: plain ValueError (including
DimensionError and ConfigError) means bad input, OSError means an I/O
failure, NumericalAbort means training blew up.
"""


class DimensionError(ValueError):
    """Array shape or size does not match what the operation requires."""


class InvalidStateError(RuntimeError):
    """Operation needs state that has not been established yet."""


class NumericalAbort(RuntimeError):
    """A non-finite value appeared where training cannot continue."""


class ConfigError(ValueError):
    """Configuration document failed schema validation."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
