"""Dense symmetric linear-algebra kernels.

Everything here operates on plain ``numpy`` arrays. Matrices are small
(d up to a few thousand), stored dense, and treated as exactly symmetric;
callers are expected to go through :func:`pd_modify` before asking for a
positive-definite solve.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, LinAlgError

__all__ = [
    "EigDecomposition",
    "NotPositiveDefiniteError",
    "check_symmetric",
    "sym_eig",
    "matrix_abs",
    "pd_modify",
    "spd_solve",
    "weighted_norm_sq",
]

SYM_RTOL = 1e-12


class NotPositiveDefiniteError(LinAlgError):
    """Raised when a Cholesky factorization hits a non-positive pivot.

    Callers should run the offending matrix through :func:`pd_modify`
    and retry.
    """


class EigDecomposition(NamedTuple):
    """Spectral decomposition ``A = U diag(values) U^T``.

    ``eigenvalues`` are sorted ascending, ``eigenvectors`` holds the
    corresponding orthonormal eigenvectors as columns.
    """

    eigenvalues: NDArray
    eigenvectors: NDArray


def check_symmetric(a: NDArray, *, rtol: float = SYM_RTOL) -> NDArray:
    """Validate that ``a`` is a finite, symmetric, square matrix.

    Returns the explicitly symmetrized matrix ``(a + a^T) / 2`` so that
    downstream LAPACK calls see an exactly symmetric input.

    Raises
    ------
    ValueError
        If ``a`` is not square, contains non-finite entries, or has an
        asymmetry exceeding ``rtol * max(1, |a_ij|)`` in any entry.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    gap = np.abs(a - a.T)
    tol = rtol * np.maximum(1.0, np.abs(a))
    if np.any(gap > tol):
        i, j = np.unravel_index(np.argmax(gap - tol), a.shape)
        raise ValueError(
            f"matrix is not symmetric: |A[{i},{j}] - A[{j},{i}]| = {gap[i, j]:.3e}"
        )
    return 0.5 * (a + a.T)


def sym_eig(a: NDArray) -> EigDecomposition:
    """Full eigendecomposition of a symmetric matrix.

    Eigenvalues come back in ascending order; the reconstruction
    ``U diag(vals) U^T`` matches the input to about 1e-9 relative in the
    max norm.
    """
    a = check_symmetric(a)
    vals, vecs = np.linalg.eigh(a)
    return EigDecomposition(vals, vecs)


def matrix_abs(a: NDArray) -> NDArray:
    """Spectral absolute value: flip the sign of every negative eigenvalue.

    For ``A = U diag(vals) U^T`` returns ``U diag(|vals|) U^T``. The result
    is positive semidefinite and commutes with ``A``.
    """
    vals, vecs = sym_eig(a)
    out = (vecs * np.abs(vals)) @ vecs.T
    return 0.5 * (out + out.T)


def pd_modify(h_hat: NDArray, mu_tilde: float) -> tuple[NDArray, bool]:
    """Make a symmetric matrix safely positive definite.

    Takes the spectral absolute value of ``h_hat`` and, if its smallest
    eigenvalue still falls below ``mu_tilde``, shifts the whole spectrum
    up so the smallest eigenvalue equals ``mu_tilde``.

    Returns
    -------
    (h_tilde, was_shifted)
        ``was_shifted`` is False exactly when ``lambda_min(|h_hat|) >=
        mu_tilde``, in which case ``h_tilde`` is ``|h_hat|`` unchanged.
    """
    if not mu_tilde > 0:
        raise ValueError(f"mu_tilde must be positive, got {mu_tilde}")
    vals, vecs = sym_eig(h_hat)
    abs_vals = np.abs(vals)
    lam_min = abs_vals.min()
    shifted = bool(lam_min < mu_tilde)
    if shifted:
        abs_vals = abs_vals + (mu_tilde - lam_min)
    out = (vecs * abs_vals) @ vecs.T
    return 0.5 * (out + out.T), shifted


def spd_solve(h: NDArray, g: NDArray) -> NDArray:
    """Solve ``H x = g`` for symmetric positive-definite ``H`` via Cholesky.

    ``g`` may be a vector or a matrix of stacked right-hand sides.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization fails; the caller should :func:`pd_modify`
        first.
    """
    h = check_symmetric(h)
    try:
        factor = cho_factor(h, lower=True, check_finite=False)
    except LinAlgError as err:
        raise NotPositiveDefiniteError(
            "Cholesky factorization failed; matrix is not positive definite"
        ) from err
    return cho_solve(factor, np.asarray(g, dtype=float), check_finite=False)


def weighted_norm_sq(v: NDArray, inverse_of: Optional[NDArray] = None) -> float:
    """Quadratic form ``v^T A v`` for ``A = I`` or ``A = H^{-1}``.

    With ``inverse_of=None`` this is the squared Euclidean norm. Passing a
    symmetric positive-definite ``H`` computes ``v^T H^{-1} v`` through a
    Cholesky solve (``H`` itself is supplied, not its inverse).
    """
    v = np.asarray(v, dtype=float)
    if inverse_of is None:
        return float(v @ v)
    x = spd_solve(inverse_of, v)
    return float(v @ x)
