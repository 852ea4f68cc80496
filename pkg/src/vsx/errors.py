"""Exception types shared across the engine."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class GraphStateError(RuntimeError):
    """The autodiff graph is not in a state that allows the request."""


class DataError(ValueError):
    """Input data violates the expected value domain."""
