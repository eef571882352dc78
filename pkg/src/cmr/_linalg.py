"""Cholesky solves for small dense symmetric positive definite systems.

All routines accept either a single matrix or a stack of matrices (batch
axes leading, matrix on the last two axes), so a (k, n, n) stack of
per-site normal matrices is factored in one call.

Factorization is delegated to LAPACK; the near-singularity guard checks the
Cholesky pivots (the squared factor diagonal) against a trace-scaled floor,
so a system that LAPACK accepts but that is singular for practical purposes
is still rejected.
"""

from __future__ import annotations

import numpy as np

from .errors import SingularSystemError

# Pivots at or below this fraction of the matrix trace are treated as zero.
PIVOT_FLOOR = 1e-12


def cholesky_factor(matrices: np.ndarray, pivot_floor: float = PIVOT_FLOOR) -> np.ndarray:
    """Lower-triangular Cholesky factor of SPD matrices.

    Raises SingularSystemError when factorization fails outright or when any
    pivot falls to or below ``pivot_floor * trace`` of its matrix.
    """
    S = np.asarray(matrices, dtype=float)
    n = S.shape[-1]
    if S.ndim < 2 or S.shape[-2] != n:
        raise ValueError(f"expected square matrices, got shape {S.shape}")
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise SingularSystemError(
            "matrix is not positive definite (Cholesky factorization failed)"
        ) from None
    pivots = np.einsum("...ii->...i", L) ** 2
    floor = np.maximum(pivot_floor * np.einsum("...ii->...", S), 0.0)
    bad = pivots <= floor[..., None]
    if np.any(bad):
        raise SingularSystemError(
            f"Cholesky pivot {float(np.min(pivots)):.3e} is at or below "
            f"{pivot_floor:g} * trace in "
            f"{int(np.count_nonzero(np.any(bad, axis=-1)))} system(s)"
        )
    return L


def _solve_lower(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = L.shape[-1]
    x = np.zeros_like(b)
    for j in range(n):
        acc = np.einsum("...k,...k->...", L[..., j, :j], x[..., :j])
        x[..., j] = (b[..., j] - acc) / L[..., j, j]
    return x


def _solve_lower_transpose(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = L.shape[-1]
    x = np.zeros_like(b)
    for j in range(n - 1, -1, -1):
        acc = np.einsum("...k,...k->...", L[..., j + 1 :, j], x[..., j + 1 :])
        x[..., j] = (b[..., j] - acc) / L[..., j, j]
    return x


def cholesky_solve(
    matrices: np.ndarray, rhs: np.ndarray, pivot_floor: float = PIVOT_FLOOR
) -> np.ndarray:
    """Solve ``S x = rhs`` for SPD ``S`` (single matrix or batch) via Cholesky."""
    L = cholesky_factor(matrices, pivot_floor=pivot_floor)
    b = np.asarray(rhs, dtype=float)
    if L.ndim == 2:
        # LAPACK beats the column-recurrence loops for a single system.
        return np.linalg.solve(L.T, np.linalg.solve(L, b))
    return _solve_lower_transpose(L, _solve_lower(L, b))
