"""Exception hierarchy shared across the workbench."""


class WorkbenchError(Exception):
    """Base class for all workbench-specific failures."""


class WeightFormatError(WorkbenchError):
    """Raised when a weight container file is malformed or truncated."""


class SamplingError(WorkbenchError):
    """Raised when range-constrained injection sampling exhausts its retry budget."""


class CalibrationError(WorkbenchError):
    """Raised when epsilon calibration cannot produce a valid model."""


class GuardError(WorkbenchError):
    """Raised by protected execution: replay budget exhausted or skip target missing."""


class StageError(WorkbenchError):
    """Raised when a pipeline stage is missing a required upstream artifact."""


class ConfigError(WorkbenchError):
    """Raised for invalid workbench configuration documents."""
