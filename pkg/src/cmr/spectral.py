"""Spectral warm start for the shared band weights.

Each site contributes a label-weighted average of its feature matrices;
averaging the outer products of those matrices concentrates around a rank-one
spike along the true shared weights plus an isotropic floor, so the principal
eigenvector is a provably good starting point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _stacked
from .errors import CmrError, ConvergenceError
from .model import MultiSiteDataset, SiteDataset

POWER_TOL = 1e-12
POWER_MAX_ITERS = 10_000
# Restart from a seeded random vector when the residual stalls this long.
_STAGNATION_WINDOW = 100
_RESTART_SEED = 0x5EED


@dataclass(frozen=True)
class SpectralState:
    """Everything the initialization computes, kept for inspection.

    ``Z`` holds one (B, P) label-weighted feature average per site, ``Q``
    their averaged outer products (symmetric PSD, B x B), ``w0`` the
    unit-norm principal eigenvector of Q under the sign convention, and
    ``top_eigenvalue`` its eigenvalue.
    """

    Z: tuple[np.ndarray, ...]
    Q: np.ndarray
    w0: np.ndarray
    top_eigenvalue: float


def site_z(site: SiteDataset) -> np.ndarray:
    """Label-weighted feature average of one site: (1/T) sum_t y_t X_t."""
    return np.einsum("tbp,t->bp", site.features, site.labels) / site.num_samples


def build_q(z_list: Sequence[np.ndarray]) -> np.ndarray:
    """Average of Z Z^T over the given matrices: (1/I) sum_i Z_i Z_i^T."""
    if len(z_list) == 0:
        raise CmrError("build_q needs at least one matrix")
    first = np.asarray(z_list[0], dtype=float)
    if first.ndim != 2:
        raise CmrError(f"expected matrices, got shape {first.shape}")
    for i, z in enumerate(z_list[1:], start=1):
        if np.shape(z) != first.shape:
            raise CmrError(
                f"matrix {i} has shape {np.shape(z)}, expected {first.shape}"
            )
    Z = np.asarray(z_list, dtype=float)
    return np.einsum("ibp,icp->bc", Z, Z) / Z.shape[0]


def _apply_sign_convention(vec: np.ndarray) -> np.ndarray:
    # Largest-magnitude coordinate non-negative; argmax breaks ties low.
    if vec[np.argmax(np.abs(vec))] < 0:
        return -vec
    return vec


def top_eigenvector(
    Q: np.ndarray, tol: float = POWER_TOL, max_iters: int = POWER_MAX_ITERS
) -> tuple[np.ndarray, float]:
    """Principal eigenpair of a symmetric matrix by power iteration.

    Starts from the normalized all-ones vector and restarts once from a
    seeded random vector if the residual stalls for 100 iterations.
    Returns ``(v, lam)`` with ``||Q v - lam v|| <= tol * max(1, lam)``,
    ``||v|| = 1``, and the largest-magnitude coordinate of ``v``
    non-negative. Raises ConvergenceError (carrying the last residual)
    when the budget runs out, and CmrError for a zero or asymmetric input.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise CmrError(f"expected a square matrix, got shape {Q.shape}")
    scale = float(np.max(np.abs(Q)))
    if scale == 0.0:
        raise CmrError("cannot take the top eigenvector of a zero matrix")
    if float(np.max(np.abs(Q - Q.T))) > 1e-9 * max(1.0, scale):
        raise CmrError("matrix is not symmetric to within 1e-9")
    if tol <= 0 or max_iters < 1:
        raise CmrError("tol must be > 0 and max_iters >= 1")

    n = Q.shape[0]
    x = np.ones(n) / np.sqrt(n)
    restarted = False
    res = np.inf
    window_res = np.inf
    lam = 0.0
    for it in range(1, max_iters + 1):
        z = Q @ x
        norm_z = float(np.linalg.norm(z))
        if norm_z <= 1e-300:
            # Start vector (numerically) in the nullspace.
            if restarted:
                raise ConvergenceError(
                    "power iteration collapsed to the nullspace", residual=res
                )
            x = _random_unit(n)
            restarted = True
            continue
        x_new = z / norm_z
        z_new = Q @ x_new
        lam = float(x_new @ z_new)
        res = float(np.linalg.norm(z_new - lam * x_new))
        if res <= tol * max(1.0, abs(lam)):
            x = x_new
            break
        if it == 1:
            window_res = res
        elif it % _STAGNATION_WINDOW == 0:
            if not restarted and res > 0.9 * window_res:
                x_new = _random_unit(n)
                restarted = True
            window_res = res
        x = x_new
    else:
        raise ConvergenceError(
            f"power iteration did not reach tol={tol:g} within {max_iters} "
            f"iterations (last residual {res:.3e})",
            residual=res,
        )

    x = x / np.linalg.norm(x)
    x = _apply_sign_convention(x)
    return x, float(x @ Q @ x)


def _random_unit(n: int) -> np.ndarray:
    rng = np.random.default_rng(_RESTART_SEED)
    while True:
        x = rng.standard_normal(n)
        norm = np.linalg.norm(x)
        if norm > 0:
            return x / norm


def _z_rows(stacked: _stacked.StackedData) -> np.ndarray:
    if stacked.uniform_size is not None:
        # Contract over the sample axis without materializing the weighted stack.
        T = stacked.uniform_size
        num_sites = stacked.num_sites
        flat = stacked.features.reshape(num_sites, T, -1)
        y = stacked.labels.reshape(num_sites, 1, T)
        z = np.matmul(y, flat)[:, 0, :] / T
        return z.reshape(num_sites, stacked.num_bands, stacked.num_pixels)
    weighted = stacked.features * stacked.labels[:, None, None]
    return _stacked.segment_sum(weighted, stacked) / stacked.sizes[:, None, None]


def _spectral_state(stacked: _stacked.StackedData) -> SpectralState:
    Z = _z_rows(stacked)
    Q = np.einsum("ibp,icp->bc", Z, Z) / Z.shape[0]
    w0, top = top_eigenvector(Q)
    return SpectralState(Z=tuple(Z), Q=Q, w0=w0, top_eigenvalue=top)


def spectral_init(data: MultiSiteDataset) -> SpectralState:
    """Run the full spectral initialization over a dataset.

    Composes the per-site label-weighted averages, their averaged outer
    product, and the power-iteration eigenpair. Propagates the zero-matrix
    error when all labels vanish.
    """
    return _spectral_state(_stacked.stack(data))


def random_sphere_init(num_bands: int, seed: int) -> np.ndarray:
    """Uniform random unit vector: normalized standard-normal draw, seeded."""
    if num_bands < 1:
        raise CmrError(f"num_bands must be >= 1, got {num_bands}")
    rng = np.random.default_rng(seed)
    while True:
        x = rng.standard_normal(num_bands)
        norm = np.linalg.norm(x)
        if norm > 0:
            return x / norm
