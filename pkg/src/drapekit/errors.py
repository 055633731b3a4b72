"""Exception hierarchy shared by all drapekit modules."""


class DrapekitError(Exception):
    """Base class for every error raised by this package."""


class DomainError(DrapekitError, ValueError):
    pass


class InvalidMesh(DrapekitError, ValueError):
    pass


class InvalidContour(DrapekitError, ValueError):
    pass


class ParseError(DrapekitError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OutOfBounds(DrapekitError, ValueError):
    pass


class NotWatertight(DrapekitError, ValueError):
    pass


class EmptyDatabase(DrapekitError, ValueError):
    pass


class LabelMismatch(DrapekitError, ValueError):
    pass


class DegenerateMesh(DrapekitError, ValueError):
    pass


class DegenerateRestShape(DrapekitError, ValueError):
    pass


class DegenerateTask(DrapekitError, ValueError):
    pass


class IcpDiverged(DrapekitError, RuntimeError):
    pass


class NumericalFailure(DrapekitError, RuntimeError):
    pass


class SimDiverged(DrapekitError, RuntimeError):
    def __init__(self, message, entry_id=None):
        self.entry_id = entry_id
        super().__init__(message)


class CalibrationFailed(DrapekitError, RuntimeError):
    pass


class OptimizationStalled(DrapekitError, RuntimeError):
    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class InvalidNoiseSpec(DrapekitError, ValueError):
    pass


class SignalTooShort(DrapekitError, ValueError):
    pass


class CategoryMismatch(DrapekitError, ValueError):
    pass


class ValidationError(DrapekitError, ValueError):
    pass


class NoData(DrapekitError, ValueError):
    pass
