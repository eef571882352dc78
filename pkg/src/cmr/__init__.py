"""Shared-mechanism bilinear regression across sites.

Fits one unit-norm band-weight vector shared by every site together with
per-site pixel weights, from a spectral initialization refined by
alternating least squares or projected gradient descent. Ships a seeded
synthetic-data generator, a Monte-Carlo recovery phase-diagram harness, a
normalized-difference water-index baseline with a cross-validation
comparison, and CSV/JSON serialization with a CLI.
"""

from .errors import (
    CmrError,
    ConvergenceError,
    DimensionMismatchError,
    SingularSystemError,
)
from .evaluate import (
    EvalReport,
    crossval,
    fit_ndwi_site,
    fold_assignments,
    ndwi_features,
    normalized_mse,
    predict_ndwi,
    sq_correlation,
    w_dist,
)
from .model import (
    CmrParams,
    FitConfig,
    Init,
    MultiSiteDataset,
    SiteDataset,
    Solver,
    gradient,
    objective,
    predict,
)
from .phase import (
    DEFAULT_I_GRID,
    DEFAULT_T_GRID,
    PhaseDiagramResult,
    PhaseDiagramSpec,
    TrialOutcome,
    run_phase_diagram,
    run_trial,
    summarize,
)
from .solvers import FitResult, fit, fit_als, fit_gd, update_v, update_w
from .spectral import (
    SpectralState,
    build_q,
    random_sphere_init,
    site_z,
    spectral_init,
    top_eigenvector,
)
from .synth import GroundTruth, SynthSpec, generate, trial_seed

__version__ = "0.1.0"

__all__ = [
    "CmrError",
    "ConvergenceError",
    "DimensionMismatchError",
    "SingularSystemError",
    "CmrParams",
    "FitConfig",
    "Init",
    "MultiSiteDataset",
    "SiteDataset",
    "Solver",
    "predict",
    "objective",
    "gradient",
    "SpectralState",
    "site_z",
    "build_q",
    "top_eigenvector",
    "spectral_init",
    "random_sphere_init",
    "FitResult",
    "fit",
    "fit_als",
    "fit_gd",
    "update_v",
    "update_w",
    "SynthSpec",
    "GroundTruth",
    "generate",
    "trial_seed",
    "EvalReport",
    "sq_correlation",
    "w_dist",
    "ndwi_features",
    "fit_ndwi_site",
    "predict_ndwi",
    "normalized_mse",
    "fold_assignments",
    "crossval",
    "PhaseDiagramSpec",
    "PhaseDiagramResult",
    "TrialOutcome",
    "run_trial",
    "run_phase_diagram",
    "summarize",
    "DEFAULT_I_GRID",
    "DEFAULT_T_GRID",
    "__version__",
]
