"""Exception hierarchy shared by every module of the package."""


class IpsgpError(Exception):
    """Base class for all package errors."""


class InvalidInputError(IpsgpError, ValueError):
    """Inputs violate a documented precondition (shape, range, grid)."""


class NumericalError(IpsgpError, ArithmeticError):
    """A computation produced non-finite values or a factorization failed."""

    def __init__(self, message, *, value=None):
        super().__init__(message)
        self.value = value


class IntegrationError(IpsgpError):
    """The ODE integrator could not reach the end of the requested grid."""

    def __init__(self, message, *, last_time=None, trajectory=None):
        super().__init__(message)
        self.last_time = last_time
        self.trajectory = trajectory


class ResourceError(IpsgpError, MemoryError):
    """A dense matrix would exceed the configured size cap."""


class OptimizationError(IpsgpError):
    """Every optimizer restart failed to produce a finite objective."""

    def __init__(self, message, *, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContractError(IpsgpError):
    """Cached state does not belong to the inputs it is used with."""


class IngestionError(IpsgpError, ValueError):
    """Raw frame data is ragged or incomplete."""

    def __init__(self, message, *, frame=None):
        super().__init__(message)
        self.frame = frame
