"""Exception types raised across the package."""


class DPGOError(Exception):
    """Base class for all package errors."""


class ShapeError(DPGOError, ValueError):
    pass


class SingularProjectionError(DPGOError, ArithmeticError):
    """A block handed to the polar projection is rank deficient."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class G2OParseError(DPGOError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class G2OFormatError(G2OParseError):
    """Mixed 2D/3D records or otherwise inconsistent file content."""


class ConnectivityError(DPGOError, ValueError):
    pass


class InfeasiblePartitionError(DPGOError, ValueError):
    pass


class ParameterError(DPGOError, ValueError):
    pass


class StepError(DPGOError, RuntimeError):
    """The inner block solver failed to produce a finite iterate."""


class DegenerateSolutionError(DPGOError, ArithmeticError):
    pass


class ProtocolViolation(DPGOError, RuntimeError):
    """A simulated robot addressed a block it shares no cut edge with."""
