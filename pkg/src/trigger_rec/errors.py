"""Exception types shared across the package."""


class TriggerRecError(Exception):
    """Base class for all library errors."""


class ShapeError(TriggerRecError):
    """Tensor dimensions incompatible with the requested operation."""


class ContractError(TriggerRecError):
    """A caller violated an operation's precondition."""


class DegenerateInputError(TriggerRecError):
    """Input is structurally valid but has no well-defined result."""


class SchemaError(TriggerRecError):
    """Feature schema is malformed or inconsistent."""


class ParseError(TriggerRecError):
    """A text record could not be parsed. Carries the offending line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigError(TriggerRecError):
    """Invalid model or run configuration."""
