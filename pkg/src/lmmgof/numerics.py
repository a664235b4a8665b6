"""Dense symmetric linear-algebra kernels.

Every decomposition of a symmetric matrix in this package funnels through
:func:`eigh_sym`, which symmetrizes its input as ``(A + A.T) / 2`` before
calling LAPACK.  Products of inverses lose symmetry at round-off level, and
making the symmetrization explicit in one place keeps the downstream
pseudo-inverses well defined.

The pseudo-inverse uses a relative eigenvalue cutoff: eigenvalues with
``|lam| <= rel_tol * |lam_max|`` are truncated to zero, with
``rel_tol = q * machine_eps`` by default for a ``q x q`` matrix.  The
matrices this is applied to are structurally singular, so the cutoff
determines the numerical rank of the whole residual transformation.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg
from numpy.typing import NDArray


class NotPositiveDefinite(ValueError):
    """A matrix required to be positive-definite failed its pivot check."""


class EigenDecomp(NamedTuple):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    values: NDArray[np.float64]
    vectors: NDArray[np.float64]


def symmetrize(a: NDArray[np.float64]) -> NDArray[np.float64]:
    """Return ``(a + a.T) / 2``."""
    return 0.5 * (a + a.T)


def check_symmetric(a: NDArray[np.float64], rel: float = 1e-12) -> None:
    """Raise ``ValueError`` unless ``a`` is square, finite and symmetric.

    Symmetry is checked to within ``rel`` relative to the largest entry.
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale > 0 and np.max(np.abs(a - a.T)) > rel * scale:
        raise ValueError("matrix is not symmetric within tolerance")


def eigh_sym(a: NDArray[np.float64]) -> EigenDecomp:
    """Eigendecomposition after explicit symmetrization.

    Parameters
    ----------
    a : ndarray
        Square matrix, assumed symmetric up to round-off.

    Returns
    -------
    EigenDecomp
        Eigenvalues in descending order and the matching orthonormal
        eigenvector columns.
    """
    w, v = np.linalg.eigh(symmetrize(np.asarray(a, dtype=float)))
    order = np.argsort(w)[::-1]
    return EigenDecomp(w[order], v[:, order])


def _pivot_floor(a: NDArray[np.float64]) -> float:
    # Smallest admissible pivot for a positive-definite factorization:
    # 1e-12 * trace / q, which scales with the matrix instead of being
    # absolute.  Boundary variance estimates produce numerically singular
    # covariance blocks and have to be caught here rather than in LAPACK.
    q = a.shape[0]
    return 1e-12 * float(np.trace(a)) / q if q else 0.0


def cholesky(a: NDArray[np.float64]) -> NDArray[np.float64]:
    """Lower-triangular Cholesky factor of a symmetric PD matrix.

    Raises
    ------
    NotPositiveDefinite
        If LAPACK fails or the smallest pivot falls at or below
        ``1e-12 * trace(a) / q``.
    """
    a = np.asarray(a, dtype=float)
    floor = _pivot_floor(a)
    try:
        lower = scipy.linalg.cholesky(a, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if float(np.min(np.diagonal(lower)) ** 2) <= floor:
        raise NotPositiveDefinite(
            f"smallest Cholesky pivot {np.min(np.diagonal(lower))**2:.3e} "
            f"at or below floor {floor:.3e}"
        )
    return lower


def pseudo_inverse(
    a: NDArray[np.float64], rel_tol: float | None = None
) -> NDArray[np.float64]:
    """Moore-Penrose pseudo-inverse of a symmetric matrix.

    Parameters
    ----------
    a : ndarray
        Symmetric matrix; symmetrized before decomposition.
    rel_tol : float, optional
        Relative eigenvalue cutoff.  Defaults to ``q * machine_eps``.
        Eigenvalues with ``|lam| <= rel_tol * |lam|.max()`` are treated
        as exact zeros.

    Returns
    -------
    ndarray
        Symmetric pseudo-inverse.  The zero matrix maps to itself.
    """
    a = np.asarray(a, dtype=float)
    q = a.shape[0]
    if rel_tol is None:
        rel_tol = q * np.finfo(float).eps
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    w, v = eigh_sym(a)
    absw = np.abs(w)
    scale = absw.max() if q else 0.0
    if scale == 0.0:
        return np.zeros_like(a)
    keep = absw > rel_tol * scale
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return symmetrize((v * inv) @ v.T)


def inv_sqrt(a: NDArray[np.float64]) -> NDArray[np.float64]:
    """Symmetric PD inverse square root ``R`` with ``R a R = I``."""
    a = np.asarray(a, dtype=float)
    w, v = eigh_sym(a)
    if w.size == 0:
        return np.zeros_like(a)
    if w[-1] <= _pivot_floor(a):
        raise NotPositiveDefinite(
            f"smallest eigenvalue {w[-1]:.3e} not positive enough for an "
            "inverse square root"
        )
    return symmetrize((v / np.sqrt(w)) @ v.T)


def solve_spd(
    a: NDArray[np.float64], rhs: NDArray[np.float64]
) -> NDArray[np.float64]:
    """Solve ``a @ x = rhs`` for symmetric positive-definite ``a``."""
    lower = cholesky(a)
    return scipy.linalg.cho_solve((lower, True), np.asarray(rhs, dtype=float))
