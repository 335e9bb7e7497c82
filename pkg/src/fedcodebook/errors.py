"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination (CLI exit code 1)."""


class ContractError(ValueError):
    """An operation was called outside its contract."""


class DimensionError(ContractError):
    """Tensor or parameter shapes do not line up."""


class ValidationError(ValueError):
    """Parsed data violates a structural invariant."""


class ParseError(ValueError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VerificationError(RuntimeError):
    """The verification battery found a failing check (CLI exit code 2)."""
