"""Categorized errors. The category decides the CLI exit code."""

from __future__ import annotations

from typing import Optional


class FlatLatError(Exception):
    """Base error for the package."""

    category = "error"
    exit_code = 1


class ContractError(FlatLatError, ValueError):
    """Raised when an operation's precondition does not hold."""

    category = "contract"


class DimensionError(ContractError):
    """Raised on incompatible tensor shapes."""

    category = "dimension"


class ConfigError(FlatLatError, ValueError):
    """Raised on invalid or inconsistent configuration."""

    category = "config"
    exit_code = 2


class UsageError(ConfigError):
    """Raised by config parsing; always names the offending key."""

    category = "usage"

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class FormatError(FlatLatError):
    """Raised when a binary file is malformed."""

    category = "format"
    exit_code = 3

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(FlatLatError, ArithmeticError):
    """Raised when a computation produces non-finite values."""

    category = "numeric"
    exit_code = 4


class TrainingError(NumericError):
    """Raised when a training loop diverges."""

    category = "training"
    exit_code = 5

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(f"{message} (step {step})" if step is not None else message)
        self.step = step


class OutputError(FlatLatError):
    """Raised when an artifact cannot be written."""

    category = "io"

    def __init__(self, path, cause: Exception):
        super().__init__(f"cannot write {path}: {cause}")
        self.path = path
