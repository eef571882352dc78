"""Command-line interface.

Subcommands: simulate, fit, predict, phase-diagram, crossval. Exit codes:
0 success, 1 validation or I/O error, 2 solver non-convergence (outputs are
still written, flagged as not converged).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import io as cmr_io
from .errors import CmrError
from .evaluate import crossval
from .model import FitConfig, Init, Solver, objective, predict
from .phase import (
    DEFAULT_BANDS,
    DEFAULT_I_GRID,
    DEFAULT_PIXELS,
    DEFAULT_T_GRID,
    DEFAULT_THRESHOLD,
    DEFAULT_TRIALS,
    PhaseDiagramSpec,
    run_phase_diagram,
)
from .solvers import fit as run_fit
from .synth import SynthSpec, generate

# 0-based LANDSAT8 green and NIR band positions, the customary
# normalized-difference water index pair.
DEFAULT_GREEN_BAND = 2
DEFAULT_NIR_BAND = 4


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmr",
        description=(
            "Shared-mechanism bilinear regression: synthetic data, fitting, "
            "prediction, recovery phase diagrams, and baseline comparison."
        ),
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    sim = sub.add_parser("simulate", help="write a seeded synthetic dataset")
    sim.add_argument("--sites", type=int, required=True)
    sim.add_argument("--samples", type=int, required=True)
    sim.add_argument("--bands", type=int, required=True)
    sim.add_argument("--pixels", type=int, required=True)
    sim.add_argument("--noise", type=float, default=0.0, help="label noise stddev")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(func=_cmd_simulate)

    fit_p = sub.add_parser("fit", help="fit shared and per-site weights")
    fit_p.add_argument("--data", required=True, help="manifest.json path")
    fit_p.add_argument("--solver", choices=[s.value for s in Solver], default=Solver.ALS.value)
    fit_p.add_argument("--init", choices=[i.value for i in Init], default=Init.SPECTRAL.value)
    fit_p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    fit_p.add_argument("--tol", type=float, default=1e-8, help="relative objective tolerance")
    fit_p.add_argument("--max-iters", type=int, default=None)
    fit_p.add_argument("--seed", type=int, default=0)
    fit_p.add_argument("--out", required=True, help="params JSON path")
    fit_p.set_defaults(func=_cmd_fit)

    pred = sub.add_parser("predict", help="per-sample predictions from saved params")
    pred.add_argument("--data", required=True, help="manifest.json path")
    pred.add_argument("--params", required=True, help="params JSON path")
    pred.add_argument("--out", required=True, help="predictions CSV path")
    pred.set_defaults(func=_cmd_predict)

    phase = sub.add_parser("phase-diagram", help="Monte-Carlo recovery grid")
    phase.add_argument("--bands", type=int, default=DEFAULT_BANDS)
    phase.add_argument("--pixels", type=int, default=DEFAULT_PIXELS)
    phase.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    phase.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    phase.add_argument("--init", choices=[i.value for i in Init], default=Init.SPECTRAL.value)
    phase.add_argument("--i-grid", type=_int_list, default=DEFAULT_I_GRID,
                       help="comma-separated site counts")
    phase.add_argument("--t-grid", type=_int_list, default=DEFAULT_T_GRID,
                       help="comma-separated per-site sample counts")
    phase.add_argument("--seed", type=int, default=0)
    phase.add_argument("--workers", type=int, default=1)
    phase.add_argument("--out", required=True, help="grid CSV path")
    phase.set_defaults(func=_cmd_phase)

    cv = sub.add_parser("crossval", help="k-fold comparison against the water-index baseline")
    cv.add_argument("--data", required=True, help="manifest.json path")
    cv.add_argument("--folds", type=int, default=4)
    cv.add_argument("--repeats", type=int, default=4)
    cv.add_argument("--green-band", type=int, default=DEFAULT_GREEN_BAND)
    cv.add_argument("--nir-band", type=int, default=DEFAULT_NIR_BAND)
    cv.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--workers", type=int, default=1)
    cv.add_argument("--out", required=True, help="report JSON path")
    cv.set_defaults(func=_cmd_crossval)

    return parser


def _cmd_simulate(args) -> int:
    spec = SynthSpec(
        num_sites=args.sites,
        num_samples=args.samples,
        num_bands=args.bands,
        num_pixels=args.pixels,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    data, truth = generate(spec)
    out_dir = Path(args.out)
    manifest_path = cmr_io.write_dataset(
        out_dir, data, provenance=f"cmr simulate seed={args.seed} noise={args.noise:g}"
    )
    truth_params = truth.as_params()
    cmr_io.write_params(
        out_dir / "ground_truth.json",
        truth_params,
        lam=0.0,
        final_objective=objective(truth_params, data, 0.0),
    )
    print(f"wrote {manifest_path} ({args.sites} sites x {args.samples} samples)")
    print(f"wrote {out_dir / 'ground_truth.json'}")
    return 0


def _cmd_fit(args) -> int:
    data = cmr_io.load_dataset(args.data)
    config = FitConfig(
        lam=args.lam,
        solver=Solver(args.solver),
        init=Init(args.init),
        tol_rel_objective=args.tol,
        max_iters=args.max_iters,
        seed=args.seed,
    )
    result = run_fit(data, config)
    cmr_io.write_params(
        args.out,
        result.params,
        lam=args.lam,
        solver=config.solver.value,
        init=config.init.value,
        iterations=result.iterations,
        final_objective=result.objective_trace[-1],
        converged=result.converged,
    )
    status = "" if result.converged else " (did not converge)"
    print(
        f"final objective {result.objective_trace[-1]:.12g} "
        f"after {result.iterations} iterations{status}"
    )
    print(f"wrote {args.out}")
    return 0 if result.converged else 2


def _cmd_predict(args) -> int:
    doc = cmr_io.read_params(args.params)
    rows = []
    for site_id, sample_ids, site in cmr_io.load_site_samples(args.data):
        v = doc.params.site_v(site_id)
        w = doc.params.w
        for t, sample_id in enumerate(sample_ids):
            rows.append(
                (site_id, sample_id, site.labels[t], predict(w, site.features[t], v))
            )
    cmr_io.write_predictions_csv(args.out, rows)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def _cmd_phase(args) -> int:
    spec = PhaseDiagramSpec(
        i_values=args.i_grid,
        t_values=args.t_grid,
        num_bands=args.bands,
        num_pixels=args.pixels,
        trials=args.trials,
        success_threshold=args.threshold,
        init=Init(args.init),
        base_seed=args.seed,
    )
    result = run_phase_diagram(spec, workers=args.workers)
    cmr_io.write_phase_csv(result, args.out)
    print(
        f"wrote {args.out} ({len(spec.i_values) * len(spec.t_values)} cells, "
        f"{spec.trials} trials each, mean success fraction {result.mean_fraction():.4f})"
    )
    return 0


def _cmd_crossval(args) -> int:
    data = cmr_io.load_dataset(args.data)
    config = FitConfig(lam=args.lam, seed=args.seed)
    cmr_report, ndwi_report = crossval(
        data,
        folds=args.folds,
        repeats=args.repeats,
        config=config,
        ndwi_bands=(args.green_band, args.nir_band),
        workers=args.workers,
    )
    cmr_io.write_crossval_report(
        args.out,
        cmr_report,
        ndwi_report,
        extra={
            "lambda": args.lam,
            "seed": args.seed,
            "green_band": args.green_band,
            "nir_band": args.nir_band,
        },
    )
    print(
        f"cmr  test nmse {cmr_report.aggregate[1]:.6f} "
        f"(train {cmr_report.aggregate[0]:.6f})"
    )
    print(
        f"ndwi test nmse {ndwi_report.aggregate[1]:.6f} "
        f"(train {ndwi_report.aggregate[0]:.6f})"
    )
    print(f"wrote {args.out}")
    return 0


def cli(argv=None) -> int:
    """Run the CLI; returns the process exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; fold the
        # latter into the validation-error code.
        return 0 if exc.code == 0 else 1
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except (CmrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
