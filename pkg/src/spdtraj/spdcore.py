"""Geometry of symmetric positive definite (SPD) matrices.

Matrix log/exp through symmetric eigendecomposition, the log-Euclidean
distance, Gaussian kernels on SPD points, Gram-matrix construction and
the PSD acceptance check used before any kernel machine is trained.

All operations symmetrize their outputs explicitly, so accumulated
floating-point asymmetry never propagates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .validation import (
    as_float_matrix,
    check_finite,
    check_gamma,
    check_square,
    check_symmetric,
    symmetrize,
)

# Eigenvalues at or below RELATIVE_RANK_TOL * max(eigenvalue) are treated as
# numerically zero: the matrix log is undefined there.
RELATIVE_RANK_TOL = 1e-14


def sym_eig(A: np.ndarray, tol: float = 1e-10):
    """Eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    A : ndarray of shape (m, m)
        Symmetric matrix. Asymmetry above ``tol`` is rejected.
    tol : float
        Maximum tolerated absolute asymmetry.

    Returns
    -------
    w : ndarray of shape (m,)
        Eigenvalues in ascending order.
    V : ndarray of shape (m, m)
        Orthonormal eigenvectors as columns, aligned with ``w``.
    """
    A = as_float_matrix(A, "A")
    check_symmetric(A, tol=tol, name="A")
    check_finite(A, "A")
    w, V = np.linalg.eigh(A)
    return w, V


def matrix_log(P: np.ndarray) -> np.ndarray:
    """Principal matrix logarithm of an SPD matrix.

    Computed as V diag(ln w) V^T from the eigendecomposition; the result
    is symmetrized before returning.

    Raises
    ------
    NumericalError
        If the smallest eigenvalue is non-positive or falls at or below
        ``RELATIVE_RANK_TOL`` times the largest one, i.e. the matrix is
        numerically singular. Regularize (add epsilon * I) and retry.
    """
    w, V = sym_eig(P)
    w_max = float(w[-1])
    if w[0] <= max(w_max, 0.0) * RELATIVE_RANK_TOL:
        raise NumericalError(
            f"matrix is numerically singular (min eigenvalue {w[0]:.3e}, "
            f"max {w_max:.3e}); add epsilon regularization before taking the log"
        )
    L = (V * np.log(w)) @ V.T
    return symmetrize(L)


def matrix_exp(S: np.ndarray) -> np.ndarray:
    """Matrix exponential of a symmetric matrix, V diag(e^w) V^T, symmetrized."""
    w, V = sym_eig(S)
    E = (V * np.exp(w)) @ V.T
    return symmetrize(E)


@dataclass(frozen=True, eq=False)
class SpdPoint:
    """An SPD matrix together with its cached matrix logarithm.

    Distances and kernels only ever touch ``log_matrix``, so the log is
    computed once here and reused everywhere downstream.
    """

    matrix: np.ndarray
    log_matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.shape != self.log_matrix.shape:
            raise ValidationError("matrix and log_matrix shapes disagree")
        check_square(self.matrix, "matrix")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "SpdPoint":
        matrix = symmetrize(as_float_matrix(matrix, "matrix"))
        return cls(matrix=matrix, log_matrix=matrix_log(matrix))

    @classmethod
    def from_log(cls, log_matrix: np.ndarray) -> "SpdPoint":
        log_matrix = symmetrize(as_float_matrix(log_matrix, "log_matrix"))
        return cls(matrix=matrix_exp(log_matrix), log_matrix=log_matrix)


def lerm_distance(p: SpdPoint, q: SpdPoint) -> float:
    """Log-Euclidean distance ||log P - log Q||_F between two SPD points."""
    if p.dim != q.dim:
        raise ValidationError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return float(np.linalg.norm(p.log_matrix - q.log_matrix, "fro"))


def lerm_sq_distance_matrix(points_a, points_b=None) -> np.ndarray:
    """All pairwise squared log-Euclidean distances.

    Parameters
    ----------
    points_a : sequence of SpdPoint
    points_b : sequence of SpdPoint, optional
        Defaults to ``points_a``; in that case the result is exactly
        symmetric with a zero diagonal.

    Returns
    -------
    ndarray of shape (len(points_a), len(points_b))
    """
    if len(points_a) == 0:
        raise ValidationError("need at least one point")
    dim = points_a[0].dim
    A = np.stack([p.log_matrix.reshape(-1) for p in points_a])
    if any(p.dim != dim for p in points_a):
        raise ValidationError("points have inconsistent dimensions")
    same = points_b is None
    if same:
        B = A
    else:
        if any(p.dim != dim for p in points_b):
            raise ValidationError("points have inconsistent dimensions")
        B = np.stack([p.log_matrix.reshape(-1) for p in points_b])
    sq_a = np.einsum("ij,ij->i", A, A)
    sq_b = sq_a if same else np.einsum("ij,ij->i", B, B)
    D2 = sq_a[:, None] + sq_b[None, :] - 2.0 * (A @ B.T)
    np.maximum(D2, 0.0, out=D2)
    if same:
        D2 = symmetrize(D2)
        np.fill_diagonal(D2, 0.0)
    return D2


def rbf_kernel(p: SpdPoint, q: SpdPoint, gamma: float) -> float:
    """Gaussian kernel exp(-gamma * d(P, Q)^2) with the log-Euclidean distance.

    Positive definite on SPD points for every gamma > 0.
    """
    check_gamma(gamma)
    d = lerm_distance(p, q)
    return float(np.exp(-gamma * d * d))


@dataclass(eq=False)
class PsdCheck:
    """Outcome of a positive-semidefiniteness check."""

    passed: bool
    min_eigenvalue: float
    max_abs_eigenvalue: float


def check_psd(K, tol: float = 1e-8) -> PsdCheck:
    """Relative-tolerance PSD test on a symmetric matrix.

    Fails iff the smallest eigenvalue drops below
    ``-tol * max(|eigenvalues|)``.

    Parameters
    ----------
    K : ndarray or KernelMatrix
    tol : float
        Relative tolerance on the admissible negative eigenvalue mass.
    """
    values = K.values if isinstance(K, KernelMatrix) else as_float_matrix(K, "K")
    check_symmetric(values, name="K")
    w = np.linalg.eigvalsh(symmetrize(values))
    min_eig = float(w[0])
    max_abs = float(np.max(np.abs(w))) if w.size else 0.0
    return PsdCheck(passed=min_eig >= -tol * max_abs, min_eigenvalue=min_eig,
                    max_abs_eigenvalue=max_abs)


@dataclass(eq=False)
class KernelMatrix:
    """A Gram matrix plus the metadata needed to reuse it safely.

    Attributes
    ----------
    values : ndarray of shape (n, n)
        Symmetric kernel values.
    kind : str
        One of ``static_rbf``, ``gak``, ``ppf_linear``, ``fused``.
    gamma : float or None
        Kernel width, when one applies.
    min_eig_estimate : float or None
        Smallest eigenvalue found the last time the matrix was checked.
    log_shift : float
        When nonzero, ``values`` hold exp(log K - log_shift): a uniform
        positive rescaling applied because raw magnitudes left the
        double-precision range. Relative structure is preserved.
    """

    values: np.ndarray
    kind: str
    gamma: float | None = None
    min_eig_estimate: float | None = None
    log_shift: float = 0.0

    KINDS = ("static_rbf", "gak", "ppf_linear", "fused")

    def __post_init__(self):
        self.values = as_float_matrix(self.values, "values")
        check_square(self.values, "values")
        check_symmetric(self.values, tol=1e-10, name="values")
        if self.kind not in self.KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


def gram_matrix(points, gamma: float) -> KernelMatrix:
    """Gaussian Gram matrix over a set of SPD points.

    The diagonal is exactly one and the matrix is exactly symmetric; the
    smallest eigenvalue found by the PSD check is recorded on the result.
    """
    check_gamma(gamma)
    D2 = lerm_sq_distance_matrix(points)
    K = np.exp(-gamma * D2)
    K = symmetrize(K)
    np.fill_diagonal(K, 1.0)
    result = check_psd(K)
    return KernelMatrix(values=K, kind="static_rbf", gamma=float(gamma),
                        min_eig_estimate=result.min_eigenvalue)


def save_matrix_csv(values: np.ndarray, path) -> None:
    """Write a matrix as plain CSV, row-major, 17 significant digits."""
    values = as_float_matrix(values, "values")
    np.savetxt(path, values, fmt="%.17g", delimiter=",")


def load_matrix_csv(path) -> np.ndarray:
    M = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return M
