class AppError(Exception):
    """Base class for all application-specific errors."""
    pass

class ValidationError(AppError):
    """Raised for configuration or parameter validation errors."""
    pass

class ShapeError(AppError, ValueError):
    """Raised when tensor shapes do not agree."""
    pass

class NumericError(AppError):
    """Raised when a loss or gradient becomes non-finite."""
    pass

class ProtocolError(AppError):
    """Raised when the task lifecycle is used out of order."""
    pass

class FrozenParameterError(ProtocolError):
    """Raised on an attempt to write parameters of a frozen task."""
    pass

class CapacityExhausted(AppError):
    """Raised when a layer has too few free memory entries for a new task."""

    def __init__(self, layer_name: str, requested: int, free: int, total: int):
        self.layer_name = layer_name
        self.requested = requested
        self.free = free
        self.total = total
        super().__init__(
            f"layer '{layer_name}' has {free} free of {total} memory entries but "
            f"{requested} were requested; expand the layer capacity (more rows in the "
            f"memory matrix) or lower the task fraction"
        )


class ForgettingDetected(AppError):
    """Raised when a frozen task's evaluation changes after later training."""
    pass

class ArchiveError(AppError):
    """Base class for knowledge-base archive errors."""
    pass

class ChecksumError(ArchiveError):
    """Raised when an archive is truncated or its digest does not match."""
    pass

class ArchiveVersionError(ArchiveError):
    """Raised when an archive was written by an unsupported format version."""
    pass

class GeometryMismatchError(ArchiveError):
    """Raised when an archive does not fit the network it is loaded into."""
    pass

class ConfigHashMismatchError(ArchiveError):
    """Raised when resuming with a configuration different from the archived one."""
    pass

class BenchmarkError(AppError):
    """Raised when a benchmark cannot be set up or run."""
    pass
