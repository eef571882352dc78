"""Monte-Carlo recovery grid over (number of sites, samples per site).

Each cell draws fresh noiseless datasets, fits from the configured
initialization, and scores the squared correlation between the estimated and
true band weights; a trial succeeds when it strictly exceeds the threshold.
Trials are independently seeded, so any execution order or degree of
parallelism produces the identical grid.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import CmrError
from .evaluate import sq_correlation
from .model import FitConfig, Init
from .solvers import fit
from .spectral import random_sphere_init, spectral_init
from .synth import SynthSpec, generate, trial_seed

DEFAULT_I_GRID = (8, 16, 32, 64, 128, 256, 512, 1024)
DEFAULT_T_GRID = (2, 4, 8, 12, 16, 24, 32, 48, 64)
DEFAULT_BANDS = 20
DEFAULT_PIXELS = 10
DEFAULT_TRIALS = 50
DEFAULT_THRESHOLD = 0.90


def _ascending(values: Iterable[int], label: str) -> tuple[int, ...]:
    out = tuple(int(v) for v in values)
    if not out:
        raise CmrError(f"{label} must be non-empty")
    if any(v < 1 for v in out):
        raise CmrError(f"{label} entries must be >= 1")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise CmrError(f"{label} must be strictly ascending")
    return out


@dataclass(frozen=True)
class PhaseDiagramSpec:
    """Grid geometry plus everything one trial needs."""

    i_values: tuple[int, ...] = DEFAULT_I_GRID
    t_values: tuple[int, ...] = DEFAULT_T_GRID
    num_bands: int = DEFAULT_BANDS
    num_pixels: int = DEFAULT_PIXELS
    trials: int = DEFAULT_TRIALS
    success_threshold: float = DEFAULT_THRESHOLD
    init: Init = Init.SPECTRAL
    fit_config: FitConfig = FitConfig()
    base_seed: int = 0
    score_init_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "i_values", _ascending(self.i_values, "i_values"))
        object.__setattr__(self, "t_values", _ascending(self.t_values, "t_values"))
        object.__setattr__(self, "init", Init(self.init))
        if self.num_bands < 1 or self.num_pixels < 1:
            raise CmrError("num_bands and num_pixels must be >= 1")
        if self.trials < 1:
            raise CmrError("trials must be >= 1")
        if not 0 < self.success_threshold <= 1:
            raise CmrError("success_threshold must be in (0, 1]")


@dataclass(frozen=True)
class TrialOutcome:
    success: bool
    sq_corr: float  # nan when the solver errored
    error: str | None = None


@dataclass(frozen=True)
class PhaseDiagramResult:
    """Success fractions and trial tallies, indexed [i_index][t_index]."""

    spec: PhaseDiagramSpec
    fractions: np.ndarray
    successes: np.ndarray
    failures: np.ndarray
    errors: np.ndarray
    mean_sq_corr: np.ndarray  # over non-error trials; 0.0 if every trial errored

    def mean_fraction(self) -> float:
        return float(self.fractions.mean())


def run_trial(
    num_sites: int,
    num_samples: int,
    num_bands: int,
    num_pixels: int,
    init: Init,
    fit_config: FitConfig,
    seed: int,
    success_threshold: float = DEFAULT_THRESHOLD,
    score_init_only: bool = False,
) -> TrialOutcome:
    """One noiseless draw-fit-score cycle.

    Solver errors are caught and reported in the outcome rather than raised,
    so degenerate cells cannot abort a grid run. Success requires the squared
    correlation to strictly exceed the threshold.
    """
    data_seed = trial_seed(seed, (0, 0), 0)
    init_seed = trial_seed(seed, (0, 0), 1)  # decorrelated from the data stream
    data, truth = generate(
        SynthSpec(
            num_sites=num_sites,
            num_samples=num_samples,
            num_bands=num_bands,
            num_pixels=num_pixels,
            noise_sigma=0.0,
            seed=data_seed,
        )
    )
    config = replace(fit_config, init=Init(init), seed=init_seed)
    try:
        if score_init_only:
            if config.init is Init.SPECTRAL:
                w_hat = spectral_init(data).w0
            else:
                w_hat = random_sphere_init(num_bands, init_seed)
        else:
            w_hat = fit(data, config).params.w
    except (CmrError, np.linalg.LinAlgError) as exc:
        return TrialOutcome(success=False, sq_corr=float("nan"), error=str(exc))
    corr2 = sq_correlation(w_hat, truth.w_true)
    return TrialOutcome(success=corr2 > success_threshold, sq_corr=corr2)


def _run_cell_trial(args) -> tuple[int, int, int, TrialOutcome]:
    spec, i_idx, t_idx, trial = args
    seed = trial_seed(spec.base_seed, (i_idx, t_idx), trial)
    outcome = run_trial(
        spec.i_values[i_idx],
        spec.t_values[t_idx],
        spec.num_bands,
        spec.num_pixels,
        spec.init,
        spec.fit_config,
        seed,
        success_threshold=spec.success_threshold,
        score_init_only=spec.score_init_only,
    )
    return i_idx, t_idx, trial, outcome


def run_phase_diagram(spec: PhaseDiagramSpec, workers: int = 1) -> PhaseDiagramResult:
    """Run every trial of every cell and tally the grid.

    Results are reduced by (cell, trial) index, never by completion order,
    so the grid is identical for any ``workers`` count.
    """
    if workers < 1:
        raise CmrError("workers must be >= 1")
    ni, nt = len(spec.i_values), len(spec.t_values)
    tasks = [
        (spec, i_idx, t_idx, trial)
        for i_idx in range(ni)
        for t_idx in range(nt)
        for trial in range(spec.trials)
    ]
    if workers == 1:
        results = map(_run_cell_trial, tasks)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_run_cell_trial, tasks, chunksize=8)

    corr_sums = np.zeros((ni, nt))
    successes = np.zeros((ni, nt), dtype=int)
    errors = np.zeros((ni, nt), dtype=int)
    try:
        for i_idx, t_idx, _trial, outcome in results:
            if outcome.error is not None:
                errors[i_idx, t_idx] += 1
            else:
                corr_sums[i_idx, t_idx] += outcome.sq_corr
                if outcome.success:
                    successes[i_idx, t_idx] += 1
    finally:
        if workers > 1:
            pool.shutdown()

    scored = spec.trials - errors
    mean_corr = np.divide(
        corr_sums, scored, out=np.zeros_like(corr_sums), where=scored > 0
    )
    return PhaseDiagramResult(
        spec=spec,
        fractions=successes / spec.trials,
        successes=successes,
        failures=spec.trials - successes - errors,
        errors=errors,
        mean_sq_corr=mean_corr,
    )


def summarize(result: PhaseDiagramResult) -> list[dict]:
    """Flatten the grid to rows in ascending (num_sites, num_samples) order."""
    rows = []
    for i_idx, num_sites in enumerate(result.spec.i_values):
        for t_idx, num_samples in enumerate(result.spec.t_values):
            rows.append(
                {
                    "I": num_sites,
                    "T": num_samples,
                    "trials": result.spec.trials,
                    "successes": int(result.successes[i_idx, t_idx]),
                    "errors": int(result.errors[i_idx, t_idx]),
                    "fraction": float(result.fractions[i_idx, t_idx]),
                    "mean_sq_corr": float(result.mean_sq_corr[i_idx, t_idx]),
                }
            )
    return rows
