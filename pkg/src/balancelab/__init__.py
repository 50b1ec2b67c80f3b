"""Comparability of treatment and control groups under random and balanced allocation."""

from .errors import DataError, DomainError

__version__ = "0.1.0"

__all__ = ["DataError", "DomainError", "__version__"]
