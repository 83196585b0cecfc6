"""Exception types shared across the package."""


class SymconsError(Exception):
    """Base class for package errors."""


class DataError(SymconsError):
    """Malformed dataset files or inconsistent example collections."""


class CheckpointError(SymconsError):
    """Unreadable, truncated, or incompatible checkpoint files."""


class NumericalError(SymconsError):
    """Non-finite values where finite numbers are required (losses, gradients)."""
