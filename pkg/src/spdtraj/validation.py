"""Small input-validation helpers used across modules."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def as_float_matrix(A, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got ndim={A.ndim}")
    return A


def check_square(A: np.ndarray, name: str = "matrix") -> np.ndarray:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {A.shape}")
    return A


def check_finite(values: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{name} contains non-finite values")
    return values


def check_symmetric(A: np.ndarray, tol: float = 1e-10, name: str = "matrix") -> np.ndarray:
    """Reject matrices whose asymmetry exceeds ``tol`` (max absolute entry)."""
    check_square(A, name)
    dev = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    if dev > tol:
        raise ValidationError(
            f"{name} is not symmetric: max |A - A^T| = {dev:.3e} exceeds {tol:.1e}"
        )
    return A


def symmetrize(A: np.ndarray) -> np.ndarray:
    """Exact symmetric part (A + A^T) / 2."""
    return (A + A.T) / 2.0


def check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not np.isfinite(gamma) or gamma <= 0.0:
        raise ValidationError(f"kernel width gamma must be positive, got {gamma}")
    return gamma


def check_weights(weights, n_channels: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """Validate a fusion weight vector: non-negative, sums to one."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError("weights must be a non-empty 1-D sequence")
    if n_channels is not None and w.size != n_channels:
        raise ValidationError(
            f"expected {n_channels} weights, got {w.size}"
        )
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite and non-negative")
    total = float(w.sum())
    if abs(total - 1.0) > tol:
        raise ValidationError(f"weights must sum to 1 (got {total!r})")
    return w
