"""Refinement solvers: alternating least squares and projected gradient descent.

Both start from a caller-chosen initialization of the shared band weights and
keep them on the unit sphere: ALS renormalizes after each exact w-step and
absorbs the scale into the per-site weights, projected GD renormalizes after
each accepted step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _stacked
from ._linalg import PIVOT_FLOOR, cholesky_solve
from .errors import CmrError, SingularSystemError
from .model import (
    CmrParams,
    FitConfig,
    Init,
    MultiSiteDataset,
    SiteDataset,
    Solver,
    make_params,
)
from .spectral import _spectral_state, random_sphere_init

ARMIJO_C = 1e-4
MAX_BACKTRACKS = 60
_EPS = float(np.finfo(float).eps)

# Optional observer called as callback(iteration, params, objective_value)
# after every completed iteration.
FitCallback = Callable[[int, CmrParams, float], None]


@dataclass(frozen=True)
class FitResult:
    """Outcome of a fit.

    ``objective_trace`` starts with the objective at the initialization and
    carries one value per completed iteration; ``iterations`` counts the
    completed iterations. ``converged`` means the final relative objective
    change was at or below the configured tolerance.
    """

    params: CmrParams
    objective_trace: tuple[float, ...]
    iterations: int
    converged: bool
    init_used: Init


def _check_unit(w: np.ndarray, label: str) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise CmrError(f"{label} must be a vector, got shape {w.shape}")
    if abs(np.linalg.norm(w) - 1.0) > 1e-6:
        raise CmrError(f"{label} must be unit-norm")
    return w


def update_v(w: np.ndarray, site: SiteDataset, lam: float) -> np.ndarray:
    """Exact per-site ridge step: minimize the site's terms with w fixed.

    With design rows a_t = X_t^T w, returns (A^T A + lam I)^{-1} A^T y via
    Cholesky. Raises SingularSystemError for a (near-)singular system, which
    with lam = 0 is the under-sampled T < P case.
    """
    w = _check_unit(w, "w")
    if lam < 0:
        raise CmrError(f"lam must be >= 0, got {lam}")
    A = np.einsum("tbp,b->tp", site.features, w)
    G = A.T @ A
    G[np.diag_indices_from(G)] += lam
    try:
        return cholesky_solve(G, A.T @ site.labels)
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"v-step normal equations for site {site.site_id!r} are singular "
            f"({exc}); set lam > 0 to regularize (required when T < P)"
        ) from None


def _ridge_v_rows(stacked: _stacked.StackedData, w: np.ndarray, lam: float) -> np.ndarray:
    """All sites' ridge v-steps at once, one row per site.

    With lam > 0 and fewer samples than pixels, the solve runs in its dual
    form A^T (A A^T + lam I)^-1 y (the same exact minimizer) so the factored
    systems are T x T instead of P x P.
    """
    A = _stacked.design_rows(stacked, w)
    T = stacked.uniform_size
    try:
        if lam > 0 and T is not None and T < stacked.num_pixels:
            a3 = A.reshape(stacked.num_sites, T, stacked.num_pixels)
            G = np.matmul(a3, a3.transpose(0, 2, 1))
            idx = np.arange(T)
            G[:, idx, idx] += lam
            u = cholesky_solve(G, stacked.labels.reshape(stacked.num_sites, T))
            return np.matmul(u[:, None, :], a3)[:, 0, :]
        G = _stacked.site_grams(A, stacked)
        idx = np.arange(stacked.num_pixels)
        G[..., idx, idx] += lam
        rhs = _stacked.segment_sum(A * stacked.labels[:, None], stacked)
        return cholesky_solve(G, rhs)
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"v-step normal equations are singular ({exc}); "
            f"set lam > 0 to regularize (required when T < P)"
        ) from None


def _solve_w(stacked: _stacked.StackedData, a: np.ndarray) -> np.ndarray:
    """Unnormalized least-squares band weights from collapsed rows a_t = X_t v."""
    G = a.T @ a
    try:
        return cholesky_solve(G, a.T @ stacked.labels)
    except SingularSystemError:
        eigs = np.linalg.eigvalsh(G)
        deficient = int(np.count_nonzero(eigs <= PIVOT_FLOOR * max(np.trace(G), 0.0)))
        raise SingularSystemError(
            f"w-step Gram matrix is singular: {deficient} deficient direction(s) "
            f"out of {G.shape[0]}; more total samples or better-spread local "
            f"weights are needed"
        ) from None


def update_w(params: CmrParams, data: MultiSiteDataset) -> tuple[np.ndarray, float]:
    """Exact least-squares step for the shared band weights, then renormalize.

    Solves the unconstrained normal equations over all sites with every v_i
    fixed and returns ``(w_hat / ||w_hat||, ||w_hat||)``. Rescaling every v_i
    by the returned scale leaves all model predictions unchanged.
    """
    stacked = _stacked.stack(data)
    v_rows = np.array([params.site_v(sid) for sid in stacked.site_ids])
    if v_rows.shape[1] != stacked.num_pixels:
        raise CmrError(
            f"v vectors have length {v_rows.shape[1]} but the data has "
            f"{stacked.num_pixels} pixels"
        )
    a = _stacked.collapsed_rows(stacked, v_rows)
    w_hat = _solve_w(stacked, a)
    scale = float(np.linalg.norm(w_hat))
    return w_hat / scale, scale


def _initial_w(stacked: _stacked.StackedData, config: FitConfig) -> np.ndarray:
    if config.init is Init.SPECTRAL:
        return _spectral_state(stacked).w0
    return random_sphere_init(stacked.num_bands, config.seed)


def _converged(f_prev: float, f_new: float, tol: float) -> bool:
    return abs(f_prev - f_new) <= tol * max(1.0, abs(f_prev))


def fit_als(
    data: MultiSiteDataset,
    config: FitConfig,
    callback: FitCallback | None = None,
    w_start: np.ndarray | None = None,
) -> FitResult:
    """Alternating least squares from the configured initialization.

    Each sweep runs every site's exact ridge v-step, the exact w-step, and
    the renormalize-and-rescale pair; the objective is recorded after every
    sweep and iteration stops once its relative change is at or below
    ``config.tol_rel_objective`` or the sweep budget runs out.

    A sweep where every collapsed row X_t v is exactly zero (e.g. all labels
    zero, so every v_i solves to zero) keeps the current band weights instead
    of failing on the degenerate w-step.

    ``w_start`` (a unit vector) bypasses ``config.init``; ``init_used``
    still reports the config value.
    """
    stacked = _stacked.stack(data)
    lam = config.lam
    max_iters = config.resolved_max_iters()
    y = stacked.labels

    if w_start is not None:
        w = _check_unit(w_start, "w_start")
    else:
        w = _initial_w(stacked, config)
    v_rows = np.zeros((stacked.num_sites, stacked.num_pixels))
    f_prev = float(y @ y)
    trace = [f_prev]
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        v_rows = _ridge_v_rows(stacked, w, lam)
        a = _stacked.collapsed_rows(stacked, v_rows)
        if np.any(a):
            w_hat = _solve_w(stacked, a)
            scale = float(np.linalg.norm(w_hat))
            w = w_hat / scale
            v_rows = v_rows * scale
            pred = a @ w_hat  # equals predictions under (w, scaled v) exactly
        else:
            pred = np.zeros_like(y)
        r = y - pred
        f = float(r @ r) + lam * float(np.sum(v_rows * v_rows))
        if not np.isfinite(f):
            raise CmrError(f"objective diverged to a non-finite value at sweep {it}")
        trace.append(f)
        iterations = it
        if callback is not None:
            callback(it, make_params(w, stacked.site_ids, v_rows), f)
        if _converged(f_prev, f, config.tol_rel_objective):
            converged = True
            break
        f_prev = f

    return FitResult(
        params=make_params(w, stacked.site_ids, v_rows),
        objective_trace=tuple(trace),
        iterations=iterations,
        converged=converged,
        init_used=config.init,
    )


def _stacked_objective(
    stacked: _stacked.StackedData, w: np.ndarray, v_rows: np.ndarray, lam: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Objective plus the residuals and design rows needed for the gradient."""
    A = _stacked.design_rows(stacked, w)
    r = stacked.labels - np.einsum("np,np->n", A, _stacked.expand_rows(v_rows, stacked))
    f = float(r @ r) + lam * float(np.sum(v_rows * v_rows))
    return f, r, A


def fit_gd(
    data: MultiSiteDataset,
    config: FitConfig,
    callback: FitCallback | None = None,
    w_start: np.ndarray | None = None,
) -> FitResult:
    """Projected gradient descent on the band weights and all local weights.

    The local weights start from the exact ridge step at the initial band
    weights (zeros if that system is singular). Each iteration takes one
    joint gradient step, projects the band weights back to the unit sphere,
    and accepts the step under an Armijo backtracking line search evaluated
    on the post-projection objective. A line search that finds no acceptable
    step within the backtracking budget ends the fit with converged=False.

    ``w_start`` (a unit vector) bypasses ``config.init``.
    """
    stacked = _stacked.stack(data)
    lam = config.lam
    max_iters = config.resolved_max_iters()
    shrink = config.gd_backtrack_factor

    if w_start is not None:
        w = _check_unit(w_start, "w_start")
    else:
        w = _initial_w(stacked, config)
    try:
        v_rows = _ridge_v_rows(stacked, w, lam)
    except SingularSystemError:
        v_rows = np.zeros((stacked.num_sites, stacked.num_pixels))

    f_cur, r, A = _stacked_objective(stacked, w, v_rows, lam)
    trace = [f_cur]
    converged = False
    iterations = 0
    step = config.gd_step_init
    for it in range(1, max_iters + 1):
        a = _stacked.collapsed_rows(stacked, v_rows)
        grad_w = -2.0 * (r @ a)
        grad_v = -2.0 * _stacked.segment_sum(A * r[:, None], stacked) + 2.0 * lam * v_rows
        grad_sq = float(grad_w @ grad_w) + float(np.sum(grad_v * grad_v))

        trial = min(config.gd_step_init, step / shrink)
        accepted = False
        # Roundoff slack keeps a stationary start from rejecting its own
        # zero move when the recomputed objective wiggles in the last bits.
        slack = 8.0 * _EPS * max(1.0, abs(f_cur))
        for _ in range(MAX_BACKTRACKS + 1):
            w_c = w - trial * grad_w
            w_c = w_c / np.linalg.norm(w_c)
            v_c = v_rows - trial * grad_v
            f_c, r_c, A_c = _stacked_objective(stacked, w_c, v_c, lam)
            if np.isfinite(f_c) and f_c <= f_cur - ARMIJO_C * trial * grad_sq + slack:
                accepted = True
                break
            trial *= shrink
        if not accepted:
            break

        w, v_rows, r, A, step = w_c, v_c, r_c, A_c, trial
        trace.append(f_c)
        iterations = it
        if callback is not None:
            callback(it, make_params(w, stacked.site_ids, v_rows), f_c)
        if _converged(f_cur, f_c, config.tol_rel_objective):
            converged = True
            break
        f_cur = f_c

    return FitResult(
        params=make_params(w, stacked.site_ids, v_rows),
        objective_trace=tuple(trace),
        iterations=iterations,
        converged=converged,
        init_used=config.init,
    )


def fit(
    data: MultiSiteDataset, config: FitConfig, callback: FitCallback | None = None
) -> FitResult:
    """Dispatch to the solver named in the config."""
    if config.solver is Solver.ALS:
        return fit_als(data, config, callback=callback)
    return fit_gd(data, config, callback=callback)
