"""
Exception types raised by the simulator.

Each class also derives from the builtin the rest of the package would
otherwise raise, so callers catching ValueError / RuntimeError keep working.
"""

from typing import Optional


class PimSimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(PimSimError, ValueError):
    """Invalid, unknown or unreadable configuration."""


class DimensionError(PimSimError, ValueError):
    """Operand shapes do not agree."""


class IntegrityError(PimSimError, ValueError):
    """A sparse operand carries data outside its mask."""


class RegionError(PimSimError, ValueError):
    """A write was addressed to a read-only array."""


class CapacityError(PimSimError, RuntimeError):
    """The modeled fabric cannot hold the requested data."""

    def __init__(self, message: str, required: Optional[int] = None, available: Optional[int] = None):
        super().__init__(message)
        self.required = required
        self.available = available


class MaskFileError(PimSimError, IOError):
    """A mask file is unreadable or malformed."""


class ScheduleError(PimSimError, RuntimeError):
    """The dataflow graph is cyclic or the emitted timeline is illegal."""
