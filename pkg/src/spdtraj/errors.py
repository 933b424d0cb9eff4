"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation failures exit
with 2, numerical failures with 3, and file/format problems with 4.
"""


class SpdtrajError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SpdtrajError, ValueError):
    """Invalid input: violated precondition, bad parameter, malformed manifest."""


class FormatError(SpdtrajError, ValueError):
    """Malformed tensor file. Carries the byte offset where the defect sits."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(SpdtrajError, ArithmeticError):
    """Numerical failure: non-PSD kernel, near-singular matrix, underflow."""


class DegenerateRegionError(ValidationError):
    """Region mask mapped onto fewer than two distinct feature-map cells."""

    def __init__(self, region_id: str, n_cells: int):
        super().__init__(
            f"region {region_id!r} maps to {n_cells} distinct feature-map "
            f"cell(s); at least 2 are required to form a covariance"
        )
        self.region_id = region_id
        self.n_cells = n_cells
