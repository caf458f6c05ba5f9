"""Exception types shared across the package."""


class VPNetError(Exception):
    """Base class for package errors."""


class ContractError(VPNetError, RuntimeError):
    """An operation was called in a state its contract forbids (e.g. backward before forward)."""


class DivergenceError(VPNetError, FloatingPointError):
    """A numerical iteration produced non-finite values."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigError(VPNetError, ValueError):
    """Invalid configuration values or unknown configuration keys."""


class DataFormatError(VPNetError, ValueError):
    """Malformed dataset, checkpoint or config file.

    ``line`` is the 1-based line number of the offending record when known.
    """

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = str(path)
            if line is not None:
                loc += f":{line}"
            loc += ": "
        elif line is not None:
            loc = f"line {line}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class UnsupportedVersionError(DataFormatError):
    """Checkpoint written with a format version this build cannot read."""
