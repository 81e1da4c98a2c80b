"""Exception types shared across the package."""


class SgcnError(Exception):
    """Base class for every error raised by sgcn_lstm."""


class DimensionError(SgcnError, ValueError):
    """Operand shapes do not agree."""


class ValidationError(SgcnError, ValueError):
    """An input violates a documented precondition."""


class ParseError(ValidationError):
    """A data file is malformed."""


class GraphIndexError(SgcnError, IndexError):
    """A node id lies outside ``[0, num_nodes)``."""


class NonFiniteError(SgcnError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class CheckpointError(SgcnError):
    """A checkpoint file could not be read or does not match the model."""
