"""Exception types raised across the package."""


class DignnError(Exception):
    """Base class for all package errors."""


class IndexOutOfRange(DignnError, IndexError):
    pass


class NonPositiveWeight(DignnError, ValueError):
    pass


class ShapeMismatch(DignnError, ValueError):
    pass


class ZeroDegree(DignnError, ValueError):
    """A normalization needs strictly positive degrees but a node is isolated."""


class ZeroDegreeNormalized(ZeroDegree):
    pass


class IsolatedNode(DignnError, ValueError):
    pass


class NonFiniteFeature(DignnError, ValueError):
    pass


class TooLarge(DignnError, ValueError):
    pass


class Singular(DignnError, ArithmeticError):
    pass


class NonFiniteIterate(DignnError, ArithmeticError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite iterate at iteration {iteration}")


class NoConvergence(DignnError, RuntimeError):
    pass


class BipartiteGraph(DignnError, ValueError):
    pass


class Disconnected(DignnError, ValueError):
    pass


class EmptyMask(DignnError, ValueError):
    pass


class EmptySplit(EmptyMask):
    pass


class NonFiniteGradient(DignnError, ArithmeticError):
    pass


class AdjointNoConvergence(NoConvergence):
    pass


class ParseError(DignnError, ValueError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class InconsistentDimensions(DignnError, ValueError):
    pass


class DisconnectedAfterRetries(DignnError, RuntimeError):
    pass


class ClassTooSmall(DignnError, ValueError):
    pass
