"""
Exception hierarchy for the toolkit.
Every failure a caller can act on derives from ToolkitError.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors"""


class ValidationError(ToolkitError, ValueError):
    """Rejected input: bad shape, bad pattern parameters, index out of range"""


class CapacityError(ToolkitError):
    """Dense materialization or rendering would exceed the configured cap"""

    def __init__(self, message: str, n: int = 0, cap: int = 0):
        super().__init__(message)
        self.n = n
        self.cap = cap


class DegenerateRowError(ToolkitError):
    """A mask row has no allowed key, softmax is undefined"""

    def __init__(self, message: str, rows=None):
        super().__init__(message)
        self.rows = list(rows) if rows is not None else []


class MismatchError(ToolkitError):
    """Two inputs that must agree (grid/spec, grid/grid, tensors/pattern) do not"""


class UnfittableError(ToolkitError):
    """Cost-model calibration design matrix is degenerate"""


class TensorFormatError(ToolkitError):
    """Malformed HATK tensor file"""


class InternalError(ToolkitError):
    """Broken internal invariant"""
