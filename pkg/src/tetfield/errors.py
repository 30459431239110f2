"""Exception types shared across the package."""


class DegenerateInputError(ValueError):
    """Input geometry is degenerate (coplanar points, zero-volume tet, coincident direction)."""


class StaleGridError(RuntimeError):
    """A TetGrid was queried against a PointSet whose positions have changed since the build."""


class PointNotFoundError(LookupError):
    """A query point lies outside the convex hull of the grid."""


class NanPropagationError(ArithmeticError):
    """A non-finite value appeared in a recorded computation; carries the op name."""

    def __init__(self, op_name: str):
        super().__init__(f"non-finite value produced by op '{op_name}'")
        self.op_name = op_name


class DivergedError(RuntimeError):
    """The optimization produced an empty extraction for too many consecutive iterations."""

    def __init__(self, message: str, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot
