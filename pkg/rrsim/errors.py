from typing import Optional

from pydantic import ValidationError


class SimError(Exception):
    """Base class for every error raised by the simulator."""


class ParameterError(SimError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ConfigError(SimError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceError(SimError):
    pass


class TraceParseError(TraceError):
    def __init__(self, line: int, offset: int, message: str):
        self.line = line
        self.offset = offset
        super().__init__(f"line {line}, offset {offset}: {message}")


class TraceValidationError(TraceError):
    def __init__(self, object_id: Optional[int], message: str):
        self.object_id = object_id
        where = f"object {object_id}" if object_id is not None else "trace"
        super().__init__(f"{where}: {message}")


class DomainError(SimError, ValueError):
    pass


class CalibrationError(SimError):
    pass


class PredictorStateError(SimError):
    pass


class BackpressureError(SimError):
    """Every eligible GPM queue is full; the caller must advance simulated time."""


class AccountingError(SimError):
    """Internal bookkeeping trap: traffic or pixels routed somewhere impossible."""


def first_field(exc: ValidationError) -> str:
    """Name of the first offending field in a pydantic ValidationError."""
    errors = exc.errors()
    if not errors or not errors[0].get("loc"):
        return "<root>"
    return ".".join(str(part) for part in errors[0]["loc"])


def first_message(exc: ValidationError) -> str:
    errors = exc.errors()
    return errors[0].get("msg", str(exc)) if errors else str(exc)
