"""Row-stacked view of a multi-site dataset for vectorized solver kernels.

Sample rows are concatenated in site order; per-site reductions run either
through a reshape (all sites the same length) or ``np.add.reduceat``
segments (ragged lengths, e.g. cross-validation folds).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MultiSiteDataset


@dataclass(frozen=True)
class StackedData:
    features: np.ndarray  # (N, B, P), all sites in site order
    labels: np.ndarray  # (N,)
    offsets: np.ndarray  # (I,) first row of each site
    sizes: np.ndarray  # (I,) samples per site
    site_ids: tuple[str, ...]
    uniform_size: int | None  # common T when every site has it, else None

    @property
    def num_sites(self) -> int:
        return len(self.site_ids)

    @property
    def num_bands(self) -> int:
        return self.features.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.features.shape[2]


def stack(data: MultiSiteDataset) -> StackedData:
    sizes = np.array([s.num_samples for s in data.sites], dtype=np.intp)
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    uniform = int(sizes[0]) if np.all(sizes == sizes[0]) else None
    return StackedData(
        features=np.concatenate([s.features for s in data.sites], axis=0),
        labels=np.concatenate([s.labels for s in data.sites]),
        offsets=offsets,
        sizes=sizes,
        site_ids=data.site_ids,
        uniform_size=uniform,
    )


def expand_rows(values: np.ndarray, stacked: StackedData) -> np.ndarray:
    """Repeat one row per site into one row per sample."""
    return np.repeat(values, stacked.sizes, axis=0)


def segment_sum(per_sample: np.ndarray, stacked: StackedData) -> np.ndarray:
    """Sum a per-sample array over each site's rows -> one entry per site."""
    if stacked.num_sites == 1:
        return per_sample.sum(axis=0, keepdims=True)
    return np.add.reduceat(per_sample, stacked.offsets, axis=0)


def design_rows(stacked: StackedData, w: np.ndarray) -> np.ndarray:
    """Per-sample rows X_t^T w, shape (N, P)."""
    return np.matmul(w, stacked.features)


def collapsed_rows(stacked: StackedData, v_rows: np.ndarray) -> np.ndarray:
    """Per-sample rows X_t v_site, shape (N, B)."""
    expanded = expand_rows(v_rows, stacked)
    return np.matmul(stacked.features, expanded[:, :, None])[:, :, 0]


def site_grams(design: np.ndarray, stacked: StackedData) -> np.ndarray:
    """Per-site Gram matrices sum_t a_t a_t^T of the (N, P) design rows."""
    if stacked.uniform_size is not None:
        a3 = design.reshape(stacked.num_sites, stacked.uniform_size, -1)
        return np.matmul(a3.transpose(0, 2, 1), a3)
    outer = design[:, :, None] * design[:, None, :]
    return segment_sum(outer, stacked)


def predictions(stacked: StackedData, w: np.ndarray, v_rows: np.ndarray) -> np.ndarray:
    """Model outputs for every sample, shape (N,)."""
    return np.einsum("np,np->n", design_rows(stacked, w), expand_rows(v_rows, stacked))
