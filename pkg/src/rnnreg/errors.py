"""Exception types shared across the library.

The CLI maps these onto process exit codes: config problems exit 1,
numerical failures exit 2, data/filesystem problems exit 3.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, consumed graph, ...)."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad type, out-of-range value)."""


class NumericsError(ArithmeticError):
    """Non-finite values encountered where finite numbers are required."""


class DataError(RuntimeError):
    """Malformed or missing input data."""
