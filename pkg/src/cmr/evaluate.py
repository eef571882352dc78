"""Recovery metrics, the water-index per-site baseline, and cross-validation.

The baseline regresses each site's labels on the per-pixel normalized band
difference (green - nir) / (green + nir) with a ridge penalty and an
unpenalized intercept; the shared-mechanism model is fit jointly on all
sites. Both are scored on identical per-site fold splits with the mean
squared error normalized by the training-label variance of the fold.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from ._linalg import cholesky_solve
from .errors import CmrError, SingularSystemError
from .model import FitConfig, MultiSiteDataset, SiteDataset
from .solvers import fit
from .synth import trial_seed


@dataclass(frozen=True)
class EvalReport:
    """Per-site and aggregate normalized MSE for one model."""

    per_site_mse: Mapping[str, tuple[float, float]]  # site_id -> (train, test)
    aggregate: tuple[float, float]
    model_tag: str
    folds: int
    repeats: int


def sq_correlation(a, b) -> float:
    """Squared correlation (a.b)^2 / (|a|^2 |b|^2); sign- and scale-invariant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise CmrError(f"expected two equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = float(a @ a), float(b @ b)
    if na == 0.0 or nb == 0.0:
        raise CmrError("squared correlation is undefined for a zero vector")
    return float(a @ b) ** 2 / (na * nb)


def w_dist(a, b) -> float:
    """Sign-invariant distance between unit vectors: sqrt(1 - (a.b)^2)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for name, vec in (("first", a), ("second", b)):
        if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            raise CmrError(f"{name} argument must be unit-norm")
    return float(np.sqrt(max(0.0, 1.0 - float(a @ b) ** 2)))


def ndwi_features(features, green_band: int, nir_band: int) -> np.ndarray:
    """Per-pixel normalized difference (green - nir) / (green + nir).

    Pixels whose band sum is smaller than 1e-12 in magnitude get feature
    value 0.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise CmrError(f"features must be a matrix, got shape {X.shape}")
    bands = X.shape[0]
    for name, idx in (("green_band", green_band), ("nir_band", nir_band)):
        if not 0 <= idx < bands:
            raise CmrError(f"{name}={idx} is out of range for {bands} bands")
    if green_band == nir_band:
        raise CmrError("green_band and nir_band must differ")
    g = X[green_band]
    n = X[nir_band]
    den = g + n
    out = np.zeros_like(g)
    ok = np.abs(den) >= 1e-12
    out[ok] = (g[ok] - n[ok]) / den[ok]
    return out


def _site_ndwi_matrix(site: SiteDataset, green_band: int, nir_band: int) -> np.ndarray:
    return np.stack(
        [ndwi_features(site.features[t], green_band, nir_band) for t in range(site.num_samples)]
    )


def fit_ndwi_site(
    site: SiteDataset, green_band: int, nir_band: int, lam: float
) -> np.ndarray:
    """Ridge regression of one site's labels on its water-index features.

    The intercept is unpenalized. Returns the P pixel weights followed by
    the intercept.
    """
    if lam < 0:
        raise CmrError(f"lam must be >= 0, got {lam}")
    F = _site_ndwi_matrix(site, green_band, nir_band)
    T, P = F.shape
    G = np.empty((P + 1, P + 1))
    G[:P, :P] = F.T @ F
    G[:P, P] = F.sum(axis=0)
    G[P, :P] = G[:P, P]
    G[P, P] = T
    G[np.arange(P), np.arange(P)] += lam
    rhs = np.concatenate([F.T @ site.labels, [site.labels.sum()]])
    try:
        return cholesky_solve(G, rhs)
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"baseline normal equations for site {site.site_id!r} are singular "
            f"({exc}); set lam > 0"
        ) from None


def predict_ndwi(
    weights: np.ndarray, site: SiteDataset, green_band: int, nir_band: int
) -> np.ndarray:
    """Baseline predictions for every sample of a site."""
    weights = np.asarray(weights, dtype=float)
    F = _site_ndwi_matrix(site, green_band, nir_band)
    if weights.shape != (F.shape[1] + 1,):
        raise CmrError(
            f"expected {F.shape[1] + 1} weights (pixels plus intercept), "
            f"got shape {weights.shape}"
        )
    return F @ weights[:-1] + weights[-1]


def normalized_mse(predictions, labels, normalizer: float) -> float:
    """Mean squared error divided by a positive normalizer."""
    predictions = np.asarray(predictions, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if predictions.shape != labels.shape or predictions.ndim != 1 or len(labels) == 0:
        raise CmrError(
            f"expected equal-length vectors, got {predictions.shape} and {labels.shape}"
        )
    if normalizer <= 0:
        raise CmrError(f"normalizer must be > 0, got {normalizer}")
    r = predictions - labels
    return float(r @ r) / len(labels) / normalizer


def fold_assignments(
    data: MultiSiteDataset, folds: int, repeats: int, seed: int
) -> list[list[dict[str, np.ndarray]]]:
    """Seeded per-site fold splits, identical for every model under test.

    Returns ``out[repeat][fold][site_id] -> test sample indices``. Each
    repeat shuffles every site's samples and cuts them into ``folds`` parts
    whose sizes differ by at most one.
    """
    if folds < 2:
        raise CmrError(f"folds must be >= 2, got {folds}")
    if repeats < 1:
        raise CmrError(f"repeats must be >= 1, got {repeats}")
    for site in data.sites:
        if site.num_samples < folds:
            raise CmrError(
                f"site {site.site_id!r} has only {site.num_samples} samples, "
                f"fewer than {folds} folds"
            )
    out = []
    for r in range(repeats):
        site_splits = []
        for s_idx, site in enumerate(data.sites):
            rng = np.random.default_rng(trial_seed(seed, (r, s_idx), 0))
            perm = rng.permutation(site.num_samples)
            site_splits.append(np.array_split(perm, folds))
        out.append(
            [
                {site.site_id: site_splits[s_idx][f] for s_idx, site in enumerate(data.sites)}
                for f in range(folds)
            ]
        )
    return out


def _subset(site: SiteDataset, idx: np.ndarray) -> SiteDataset:
    return SiteDataset(
        site_id=site.site_id, labels=site.labels[idx], features=site.features[idx]
    )


def _cmr_site_predictions(params, site: SiteDataset) -> np.ndarray:
    v = params.site_v(site.site_id)
    return np.einsum("tbp,b->tp", site.features, params.w) @ v


def _crossval_cell(args) -> dict[str, tuple[float, float, float, float]]:
    """Score one (repeat, fold) cell; returns per-site
    (cmr_train, cmr_test, ndwi_train, ndwi_test) normalized MSEs."""
    data, fold_of_site, config, cell_seed, green_band, nir_band = args
    config = replace(config, seed=cell_seed)
    train_sites = {}
    test_sites = {}
    for site in data.sites:
        test_idx = np.sort(fold_of_site[site.site_id])
        mask = np.ones(site.num_samples, dtype=bool)
        mask[test_idx] = False
        train_sites[site.site_id] = _subset(site, np.flatnonzero(mask))
        test_sites[site.site_id] = _subset(site, test_idx)

    train_data = MultiSiteDataset(sites=tuple(train_sites[sid] for sid in data.site_ids))
    cmr_params = fit(train_data, config).params

    out = {}
    for sid in data.site_ids:
        train, test = train_sites[sid], test_sites[sid]
        normalizer = float(np.var(train.labels))
        if normalizer <= 0:
            raise CmrError(
                f"training labels of site {sid!r} have zero variance in a fold"
            )
        pred_tr = _cmr_site_predictions(cmr_params, train)
        pred_te = _cmr_site_predictions(cmr_params, test)

        model = fit_ndwi_site(train, green_band, nir_band, config.lam)
        base_tr = predict_ndwi(model, train, green_band, nir_band)
        base_te = predict_ndwi(model, test, green_band, nir_band)
        out[sid] = (
            normalized_mse(pred_tr, train.labels, normalizer),
            normalized_mse(pred_te, test.labels, normalizer),
            normalized_mse(base_tr, train.labels, normalizer),
            normalized_mse(base_te, test.labels, normalizer),
        )
    return out


def crossval(
    data: MultiSiteDataset,
    folds: int,
    repeats: int,
    config: FitConfig,
    ndwi_bands: tuple[int, int],
    workers: int = 1,
) -> tuple[EvalReport, EvalReport]:
    """Shuffled k-fold comparison of the joint fit against the per-site baseline.

    Per repeat, every site's samples are shuffled (seeded from
    ``config.seed``) and split into ``folds`` parts. For each fold the joint
    model is fit on the union of all sites' training samples while the
    baseline is fit per site; both are scored on the identical held-out
    samples. MSEs are normalized by the variance of the site's training
    labels within the fold and averaged over all (repeat, fold) cells.

    Cells are independent jobs, each fitting with a seed derived from
    ``config.seed`` and its (repeat, fold) indices; results are reduced in
    (repeat, fold) order, so any ``workers`` count yields the identical
    reports. Returns ``(joint_report, baseline_report)``.
    """
    if workers < 1:
        raise CmrError("workers must be >= 1")
    green_band, nir_band = ndwi_bands
    assignments = fold_assignments(data, folds, repeats, config.seed)
    jobs = [
        (data, fold_of_site, config,
         trial_seed(config.seed, (r, f), 1), green_band, nir_band)
        for r, per_fold in enumerate(assignments)
        for f, fold_of_site in enumerate(per_fold)
    ]
    if workers == 1:
        cell_results = list(map(_crossval_cell, jobs))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cell_results = list(pool.map(_crossval_cell, jobs, chunksize=1))

    sums = {sid: [0.0, 0.0, 0.0, 0.0] for sid in data.site_ids}
    for cell in cell_results:
        for sid, vals in cell.items():
            for k in range(4):
                sums[sid][k] += vals[k]

    cells = len(jobs)
    reports = []
    for tag, (tr_k, te_k) in (("CMR", (0, 1)), ("NDWI", (2, 3))):
        per_site = {
            sid: (vals[tr_k] / cells, vals[te_k] / cells) for sid, vals in sums.items()
        }
        train_mean = sum(v[0] for v in per_site.values()) / len(per_site)
        test_mean = sum(v[1] for v in per_site.values()) / len(per_site)
        reports.append(
            EvalReport(
                per_site_mse=per_site,
                aggregate=(train_mean, test_mean),
                model_tag=tag,
                folds=folds,
                repeats=repeats,
            )
        )
    return reports[0], reports[1]
