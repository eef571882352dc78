"""Core model: multi-site datasets and the shared-mechanism bilinear regression.

Every sample is a (bands x pixels) feature matrix X with a scalar label y.
One band-weight vector w is shared across all sites; each site i carries its
own pixel-weight vector v_i, and the model predicts y = w^T X v_i.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .errors import CmrError, DimensionMismatchError


class Solver(str, Enum):
    """Available refinement solvers."""

    ALS = "als"
    PROJECTED_GD = "gd"


class Init(str, Enum):
    """Available initializations for the shared band weights."""

    SPECTRAL = "spectral"
    RANDOM_SPHERE = "random"


def _frozen_float_array(x, ndim: int, label: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != ndim:
        raise CmrError(f"{label} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise CmrError(f"{label} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SiteDataset:
    """Labeled samples for one site.

    Attributes
    ----------
    site_id : str
        Opaque identifier, unique within a multi-site dataset.
    labels : ndarray, shape (T,)
        Scalar targets, one per sample.
    features : ndarray, shape (T, B, P)
        One bands-by-pixels matrix per sample. Arrays are frozen read-only
        on construction.
    """

    site_id: str
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        labels = _frozen_float_array(self.labels, 1, f"site {self.site_id!r}: labels")
        features = _frozen_float_array(
            self.features, 3, f"site {self.site_id!r}: features"
        )
        if labels.shape[0] != features.shape[0]:
            raise CmrError(
                f"site {self.site_id!r}: {labels.shape[0]} labels but "
                f"{features.shape[0]} feature matrices"
            )
        if labels.shape[0] == 0:
            raise CmrError(f"site {self.site_id!r}: at least one sample is required")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", features)

    @property
    def num_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def num_bands(self) -> int:
        return self.features.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.features.shape[2]


@dataclass(frozen=True)
class MultiSiteDataset:
    """A collection of sites sharing one (bands, pixels) geometry."""

    sites: tuple[SiteDataset, ...]
    meta: Mapping[str, object] | None = None

    def __post_init__(self):
        sites = tuple(self.sites)
        if not sites:
            raise CmrError("a dataset needs at least one site")
        b, p = sites[0].num_bands, sites[0].num_pixels
        for site in sites[1:]:
            if (site.num_bands, site.num_pixels) != (b, p):
                raise DimensionMismatchError(
                    f"site {site.site_id!r} has shape ({site.num_bands}, "
                    f"{site.num_pixels}) but site {sites[0].site_id!r} has ({b}, {p})"
                )
        ids = [s.site_id for s in sites]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise CmrError(f"duplicate site_id {dup!r}")
        object.__setattr__(self, "sites", sites)

    @property
    def num_sites(self) -> int:
        return len(self.sites)

    @property
    def num_bands(self) -> int:
        return self.sites[0].num_bands

    @property
    def num_pixels(self) -> int:
        return self.sites[0].num_pixels

    @property
    def site_ids(self) -> tuple[str, ...]:
        return tuple(s.site_id for s in self.sites)

    def site(self, site_id: str) -> SiteDataset:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise CmrError(f"no site with id {site_id!r}")


@dataclass(frozen=True)
class CmrParams:
    """Fitted parameters: shared band weights plus per-site pixel weights.

    ``w`` is unit-norm after any fit or normalization step. ``v`` maps each
    site_id to that site's pixel-weight vector.
    """

    w: np.ndarray
    v: Mapping[str, np.ndarray]

    def __post_init__(self):
        w = _frozen_float_array(self.w, 1, "w")
        v = {}
        for site_id, vec in dict(self.v).items():
            v[site_id] = _frozen_float_array(vec, 1, f"v[{site_id!r}]")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "v", v)

    @property
    def num_bands(self) -> int:
        return self.w.shape[0]

    def site_v(self, site_id: str) -> np.ndarray:
        try:
            return self.v[site_id]
        except KeyError:
            raise CmrError(f"params carry no local weights for site {site_id!r}") from None


@dataclass(frozen=True)
class FitConfig:
    """Solver settings.

    ``max_iters=None`` resolves to the solver default: 500 ALS sweeps or
    5000 gradient iterations.
    """

    lam: float = 1e-3
    solver: Solver = Solver.ALS
    init: Init = Init.SPECTRAL
    tol_rel_objective: float = 1e-8
    max_iters: int | None = None
    gd_step_init: float = 1.0
    gd_backtrack_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "solver", Solver(self.solver))
        object.__setattr__(self, "init", Init(self.init))
        if self.lam < 0:
            raise CmrError(f"lam must be >= 0, got {self.lam}")
        if self.tol_rel_objective <= 0:
            raise CmrError("tol_rel_objective must be > 0")
        if self.max_iters is not None and self.max_iters < 1:
            raise CmrError("max_iters must be >= 1")
        if self.gd_step_init <= 0:
            raise CmrError("gd_step_init must be > 0")
        if not 0 < self.gd_backtrack_factor < 1:
            raise CmrError("gd_backtrack_factor must be in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise CmrError("seed must fit in an unsigned 64-bit integer")

    def resolved_max_iters(self) -> int:
        if self.max_iters is not None:
            return self.max_iters
        return 500 if self.solver is Solver.ALS else 5000


def predict(w, features, v) -> float:
    """Model output for one sample: sum_b sum_p w[b] * X[b, p] * v[p]."""
    w = np.asarray(w, dtype=float)
    X = np.asarray(features, dtype=float)
    v = np.asarray(v, dtype=float)
    if w.ndim != 1:
        raise DimensionMismatchError(f"band weights must be a vector, got shape {w.shape}")
    if X.ndim != 2:
        raise DimensionMismatchError(f"features must be a matrix, got shape {X.shape}")
    if v.ndim != 1:
        raise DimensionMismatchError(f"pixel weights must be a vector, got shape {v.shape}")
    if X.shape[0] != w.shape[0]:
        raise DimensionMismatchError(
            f"band weights have length {w.shape[0]} but features have {X.shape[0]} bands"
        )
    if X.shape[1] != v.shape[0]:
        raise DimensionMismatchError(
            f"pixel weights have length {v.shape[0]} but features have {X.shape[1]} pixels"
        )
    for name, arr in (("band weights", w), ("features", X), ("pixel weights", v)):
        if not np.isfinite(arr).all():
            raise CmrError(f"{name} contain non-finite values")
    return float(w @ X @ v)


def _check_params_against(params: CmrParams, data: MultiSiteDataset):
    if params.w.shape[0] != data.num_bands:
        raise DimensionMismatchError(
            f"w has length {params.w.shape[0]} but the data has {data.num_bands} bands"
        )
    for site in data.sites:
        v = params.site_v(site.site_id)
        if v.shape[0] != data.num_pixels:
            raise DimensionMismatchError(
                f"v[{site.site_id!r}] has length {v.shape[0]} but the data has "
                f"{data.num_pixels} pixels"
            )


def objective(params: CmrParams, data: MultiSiteDataset, lam: float) -> float:
    """Penalized squared error: sum of squared residuals plus lam * sum ||v_i||^2.

    The unit-norm constraint on w is not part of the value; solvers maintain
    it structurally.
    """
    if lam < 0:
        raise CmrError(f"lam must be >= 0, got {lam}")
    _check_params_against(params, data)
    w = params.w
    total = 0.0
    for site in data.sites:
        v = params.site_v(site.site_id)
        pred = np.einsum("tbp,b->tp", site.features, w) @ v
        r = site.labels - pred
        total += float(r @ r) + lam * float(v @ v)
    return total


def gradient(
    params: CmrParams, data: MultiSiteDataset, lam: float
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Analytic gradients of the penalized objective.

    Returns ``(grad_w, grads_v)`` with ``grads_v`` ordered like
    ``data.sites``. With residual r = y - w^T X v:
    grad_w accumulates -2 r (X v) over all samples, and each site's grad_v
    is -2 sum_t r (X^T w) + 2 lam v.
    """
    if lam < 0:
        raise CmrError(f"lam must be >= 0, got {lam}")
    _check_params_against(params, data)
    w = params.w
    grad_w = np.zeros_like(w)
    grads_v = []
    for site in data.sites:
        v = params.site_v(site.site_id)
        A = np.einsum("tbp,b->tp", site.features, w)  # rows X_t^T w
        a = np.einsum("tbp,p->tb", site.features, v)  # rows X_t v
        r = site.labels - A @ v
        grad_w += -2.0 * (r @ a)
        grads_v.append(-2.0 * (r @ A) + 2.0 * lam * v)
    return grad_w, grads_v


def make_params(
    w: np.ndarray, site_ids: Sequence[str], v_rows: np.ndarray
) -> CmrParams:
    """Assemble CmrParams from a stacked (num_sites, P) matrix of pixel weights."""
    return CmrParams(w=w, v={sid: v_rows[i] for i, sid in enumerate(site_ids)})
