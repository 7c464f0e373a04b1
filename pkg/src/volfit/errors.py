"""Exception hierarchy shared by all volfit modules."""


class VolfitError(Exception):
    """Base class for every error raised by volfit."""


class NonFiniteInput(VolfitError, ValueError):
    pass


class AllZeroReturns(VolfitError, ValueError):
    pass


class ParseError(VolfitError, ValueError):
    """Malformed input file. Carries the offending path and line number."""

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class EmptyPanel(VolfitError, ValueError):
    pass


class SeriesTooShort(VolfitError, ValueError):
    pass


class InsufficientHistory(VolfitError, ValueError):
    pass


class RankDeficient(VolfitError, ValueError):
    pass


class NonConvergence(VolfitError, RuntimeError):
    def __init__(self, message, duality_gap=None):
        self.duality_gap = duality_gap
        super().__init__(message)


class EmptyData(VolfitError, ValueError):
    pass


class ShapeMismatch(VolfitError, ValueError):
    pass


class DivergenceDetected(VolfitError, RuntimeError):
    pass


class Misaligned(VolfitError, ValueError):
    pass


class NonStationarySpec(VolfitError, ValueError):
    pass


class EstimationError(VolfitError, RuntimeError):
    """Estimator failure tagged with where it happened (asset, window, candidate)."""

    def __init__(self, message, **context):
        self.context = context
        tag = ", ".join(f"{k}={v}" for k, v in context.items())
        super().__init__(f"{message} [{tag}]" if tag else message)


class DegenerateLosses(UserWarning):
    """All MCS loss differentials are identically zero; every model survives."""


class RankDeficientWarning(UserWarning):
    pass
