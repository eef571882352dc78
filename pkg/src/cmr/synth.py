"""Seeded synthetic data: exactly realizable bilinear samples, optional noise.

Draw order is committed so that site 0 is identical for the same seed no
matter how many sites follow: per site, first the local pixel weights, then
all of that site's feature matrices (sample-major, entries row-major), then
its noise draws when noise_sigma > 0. Labels are computed with the same
floating-point operation order as :func:`cmr.model.predict`, so noiseless
data satisfies y == predict(w, X, v) bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CmrError
from .model import CmrParams, MultiSiteDataset, SiteDataset

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """splitmix64 finalizer: a 64-bit avalanche bijection."""
    z &= _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def trial_seed(base_seed: int, cell: tuple[int, int], trial: int) -> int:
    """Deterministic 64-bit seed for one trial of one grid cell.

    Chains an avalanche mix over (base_seed, cell indices, trial index) so
    every trial gets an independent, reproducible stream.
    """
    i_index, t_index = cell
    if base_seed < 0 or i_index < 0 or t_index < 0 or trial < 0:
        raise CmrError("trial_seed arguments must be non-negative")
    h = _mix64(base_seed)
    for part in (i_index, t_index, trial):
        h = _mix64(h ^ _mix64((part + _GOLDEN) & _MASK64))
    return h


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the generative model."""

    num_sites: int
    num_samples: int
    num_bands: int
    num_pixels: int
    noise_sigma: float = 0.0
    v_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_sites", "num_samples", "num_bands", "num_pixels"):
            if getattr(self, name) < 1:
                raise CmrError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise CmrError("noise_sigma must be >= 0")
        if self.v_scale <= 0:
            raise CmrError("v_scale must be > 0")
        if not 0 <= int(self.seed) < 2**64:
            raise CmrError("seed must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class GroundTruth:
    """The generating parameters, kept in site order."""

    w_true: np.ndarray
    v_true: tuple[np.ndarray, ...]
    site_ids: tuple[str, ...]

    def __post_init__(self):
        w = np.asarray(self.w_true, dtype=float)
        if abs(np.linalg.norm(w) - 1.0) > 1e-12:
            raise CmrError("w_true must be unit-norm to within 1e-12")
        w.setflags(write=False)
        object.__setattr__(self, "w_true", w)
        object.__setattr__(self, "v_true", tuple(np.asarray(v, dtype=float) for v in self.v_true))

    def as_params(self) -> CmrParams:
        return CmrParams(w=self.w_true, v=dict(zip(self.site_ids, self.v_true)))


def generate(spec: SynthSpec) -> tuple[MultiSiteDataset, GroundTruth]:
    """Draw one dataset and its generating parameters.

    The shared band weights are uniform on the unit sphere (normalized
    standard-normal vector); each site's pixel weights are i.i.d. normal with
    standard deviation ``v_scale``; features are i.i.d. standard normal; and
    labels are w^T X v plus optional ``noise_sigma`` Gaussian noise.
    """
    rng = np.random.default_rng(spec.seed)
    B, P, T = spec.num_bands, spec.num_pixels, spec.num_samples

    w = rng.standard_normal(B)
    norm = np.linalg.norm(w)
    while norm == 0.0:
        w = rng.standard_normal(B)
        norm = np.linalg.norm(w)
    w = w / norm

    sites = []
    v_list = []
    ids = tuple(f"site_{i:04d}" for i in range(spec.num_sites))
    for i in range(spec.num_sites):
        v = spec.v_scale * rng.standard_normal(P)
        X = rng.standard_normal((T, B, P))
        y = np.empty(T)
        for t, x_t in enumerate(X):
            y[t] = w.dot(x_t).dot(v)  # same op order as model.predict
        if spec.noise_sigma > 0:
            y = y + spec.noise_sigma * rng.standard_normal(T)
        sites.append(SiteDataset(site_id=ids[i], labels=y, features=X))
        v_list.append(v)

    data = MultiSiteDataset(
        sites=tuple(sites),
        meta={
            "source": "cmr.synth.generate",
            "seed": int(spec.seed),
            "noise_sigma": float(spec.noise_sigma),
            "v_scale": float(spec.v_scale),
        },
    )
    return data, GroundTruth(w_true=w, v_true=tuple(v_list), site_ids=ids)
