from typing import Optional


class ConfigurationError(ValueError):
    """Invalid configuration values or inconsistent dimensions."""


class ContractViolation(ValueError):
    """A precondition of an operation was not met by its arguments."""


class FormatError(ValueError):
    """
    Malformed external input (CSV, JSON, binary artifact).

    Attributes
    ----------
    row: Optional[int]
        1-based data row number (header excluded) when the error concerns a row.
    """
    def __init__(self, message: str, row: Optional[int] = None) -> None:
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericalError(ArithmeticError):
    def __init__(self, message: str, example_id: Optional[int] = None) -> None:
        self.example_id = example_id
        if example_id is not None:
            message = f"{message} (example {example_id})"
        super().__init__(message)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int) -> None:
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} at epoch {epoch}, step {step}")


class LanguageNotFoundError(LookupError):
    pass


class UndefinedSimilarityError(ValueError):
    """Cosine similarity with an all-zero mask operand."""


class UndefinedCorrelationError(ValueError):
    """Pearson r of a constant (or too short) series."""


class DependencyError(FileNotFoundError):
    """
    An upstream artifact is missing.

    Attributes
    ----------
    producer: str
        Name of the command that produces the missing artifact.
    """
    def __init__(self, message: str, producer: str) -> None:
        self.producer = producer
        super().__init__(f"{message}; run `{producer}` first")


class StaleCacheError(RuntimeError):
    """A cached artifact was produced from a different configuration."""


class LockedError(RuntimeError):
    """
    Another run holds the lock on an experiment directory.

    Attributes
    ----------
    lock_path: str
        The lock file; remove it by hand if its owner is gone.
    """
    def __init__(self, message: str, lock_path: str) -> None:
        self.lock_path = lock_path
        super().__init__(message)
