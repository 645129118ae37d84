"""Exception types shared across the package."""


class A2FError(Exception):
    pass


class ConfigurationError(A2FError, ValueError):
    """Bad shapes, channel counts or hyperparameters."""


class NumericalError(A2FError, ArithmeticError):
    """Non-finite values where finite ones are required."""

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class StorageError(A2FError, OSError):
    pass


class BadMagicError(StorageError):
    pass


class VersionError(StorageError):
    pass


class ChecksumError(StorageError):
    pass


class ShapeMismatchError(StorageError):
    pass


class EvaluationError(A2FError, ValueError):
    pass


class ImageIOError(A2FError, OSError):
    pass


class PatchTooLargeError(A2FError, ValueError):
    pass


class DatasetError(A2FError, ValueError):
    """Missing, empty or inconsistent dataset directories."""

    def __init__(self, message, orphans=()):
        super().__init__(message)
        self.orphans = list(orphans)
