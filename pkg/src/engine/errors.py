"""
Exception hierarchy shared by the engine, ingestion and the CLI.

Every class carries the process exit code the CLI maps it to.
"""

from typing import Optional


class DcgmmError(Exception):
    exit_code = 1


class ConfigurationError(DcgmmError, ValueError):
    """Invalid architecture, schedule or layer parameters."""

    def __init__(self, message: str, layer_index: Optional[int] = None, token: Optional[str] = None):
        self.layer_index = layer_index
        self.token = token
        prefix = ""
        if layer_index is not None:
            prefix = f"layer {layer_index}"
            if token:
                prefix += f" '{token}'"
            prefix += ": "
        super().__init__(prefix + message)


class UnsupportedConfigurationError(ConfigurationError):
    pass


class UsageError(DcgmmError):
    pass


class ShapeMismatchError(DcgmmError, ValueError):
    pass


class DataError(DcgmmError):
    exit_code = 2


class IngestionError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericalAbortError(DcgmmError, ArithmeticError):
    """Raised when training produces a non-finite loss."""

    exit_code = 3

    def __init__(self, message: str, snapshot: Optional[dict] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
