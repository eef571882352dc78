"""File formats: per-site CSVs with a JSON manifest, parameter documents,
and the flat CSV behind phase-diagram plots.

Floats in CSVs are rendered with 17 significant digits, so every write/read
pair is lossless for finite 64-bit values. JSON documents carry a
``format_version`` field (currently 1 everywhere).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CmrError
from .model import CmrParams, MultiSiteDataset, SiteDataset
from .phase import PhaseDiagramResult, summarize

FORMAT_VERSION = 1

PHASE_CSV_HEADER = ("I", "T", "trials", "successes", "errors", "fraction", "mean_sq_corr")
PREDICTIONS_CSV_HEADER = ("site_id", "sample_id", "y", "y_hat")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _site_csv_header(num_bands: int, num_pixels: int) -> list[str]:
    cols = ["sample_id", "y"]
    for b in range(num_bands):
        for p in range(num_pixels):
            cols.append(f"x_{b}_{p}")
    return cols


@dataclass(frozen=True)
class DatasetManifest:
    """Index of one dataset: geometry plus per-site CSV paths."""

    format_version: int
    num_bands: int
    num_pixels: int
    sites: tuple[tuple[str, str], ...]  # (site_id, relative csv path)
    provenance: str = ""


@dataclass(frozen=True)
class ParamsDocument:
    """Fitted (or generating) parameters plus fit metadata, as stored on disk."""

    params: CmrParams
    num_bands: int
    num_pixels: int
    lam: float
    solver: str | None = None
    init: str | None = None
    iterations: int | None = None
    final_objective: float | None = None
    converged: bool | None = None


def write_site_csv(path, site: SiteDataset, sample_ids: Sequence[str] | None = None):
    """One row per sample: sample_id, label, then features flattened band-major."""
    if sample_ids is None:
        sample_ids = [f"s{t}" for t in range(site.num_samples)]
    elif len(sample_ids) != site.num_samples:
        raise CmrError(
            f"{len(sample_ids)} sample_ids for {site.num_samples} samples"
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_site_csv_header(site.num_bands, site.num_pixels))
        for t in range(site.num_samples):
            row = [sample_ids[t], _fmt(site.labels[t])]
            row.extend(_fmt(x) for x in site.features[t].ravel())
            writer.writerow(row)


def parse_site_csv(path, num_bands: int, num_pixels: int):
    """Parse a site CSV into (sample_ids, labels, features).

    Errors carry the offending line number (and column for a bad cell).
    """
    expected = _site_csv_header(num_bands, num_pixels)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CmrError(f"{path}: file is empty") from None
        if header != expected:
            raise CmrError(
                f"{path}: line 1: header has {len(header)} columns, expected "
                f"{len(expected)} (sample_id, y, then {num_bands}*{num_pixels} "
                f"band-major feature columns)"
            )
        ids = []
        labels = []
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise CmrError(
                    f"{path}: line {line_no}: {len(row)} columns, expected {len(expected)}"
                )
            ids.append(row[0])
            values = np.empty(len(expected) - 1)
            for col, cell in enumerate(row[1:], start=2):
                try:
                    values[col - 2] = float(cell)
                except ValueError:
                    raise CmrError(
                        f"{path}: line {line_no}, column {col}: {cell!r} is not a number"
                    ) from None
            labels.append(values[0])
            rows.append(values[1:].reshape(num_bands, num_pixels))
    if not ids:
        raise CmrError(f"{path}: no data rows")
    return ids, np.array(labels), np.array(rows)


def read_site_csv(path, num_bands: int, num_pixels: int, site_id: str | None = None) -> SiteDataset:
    """Load one site; ``site_id`` defaults to the file stem."""
    _, labels, features = parse_site_csv(path, num_bands, num_pixels)
    if site_id is None:
        site_id = Path(path).stem
    return SiteDataset(site_id=site_id, labels=labels, features=features)


def write_manifest(path, manifest: DatasetManifest):
    doc = {
        "format_version": manifest.format_version,
        "B": manifest.num_bands,
        "P": manifest.num_pixels,
        "sites": [{"site_id": sid, "path": rel} for sid, rel in manifest.sites],
        "provenance": manifest.provenance,
    }
    _write_json(path, doc)


def read_manifest(path) -> DatasetManifest:
    doc = _read_json(path)
    for key in ("format_version", "B", "P", "sites"):
        if key not in doc:
            raise CmrError(f"{path}: manifest is missing {key!r}")
    if doc["format_version"] != FORMAT_VERSION:
        raise CmrError(
            f"{path}: unsupported format_version {doc['format_version']}, "
            f"expected {FORMAT_VERSION}"
        )
    sites = tuple((entry["site_id"], entry["path"]) for entry in doc["sites"])
    return DatasetManifest(
        format_version=doc["format_version"],
        num_bands=int(doc["B"]),
        num_pixels=int(doc["P"]),
        sites=sites,
        provenance=str(doc.get("provenance", "")),
    )


def write_dataset(out_dir, data: MultiSiteDataset, provenance: str = "") -> Path:
    """Write one CSV per site plus the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for site in data.sites:
        rel = f"{site.site_id}.csv"
        write_site_csv(out_dir / rel, site)
        entries.append((site.site_id, rel))
    manifest = DatasetManifest(
        format_version=FORMAT_VERSION,
        num_bands=data.num_bands,
        num_pixels=data.num_pixels,
        sites=tuple(entries),
        provenance=provenance,
    )
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, manifest)
    return manifest_path


def load_dataset(manifest_path) -> MultiSiteDataset:
    """Load every site referenced by a manifest, validating its geometry."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    sites = []
    for site_id, rel in manifest.sites:
        csv_path = manifest_path.parent / rel
        if not csv_path.exists():
            raise CmrError(f"{manifest_path}: referenced CSV does not exist: {csv_path}")
        sites.append(
            read_site_csv(csv_path, manifest.num_bands, manifest.num_pixels, site_id=site_id)
        )
    return MultiSiteDataset(
        sites=tuple(sites),
        meta={"manifest": str(manifest_path), "provenance": manifest.provenance},
    )


def load_site_samples(manifest_path) -> list[tuple[str, list[str], SiteDataset]]:
    """Like load_dataset but keeps each site's sample_id column."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    out = []
    for site_id, rel in manifest.sites:
        csv_path = manifest_path.parent / rel
        if not csv_path.exists():
            raise CmrError(f"{manifest_path}: referenced CSV does not exist: {csv_path}")
        ids, labels, features = parse_site_csv(csv_path, manifest.num_bands, manifest.num_pixels)
        out.append((site_id, ids, SiteDataset(site_id=site_id, labels=labels, features=features)))
    return out


def write_params(
    path,
    params: CmrParams,
    lam: float,
    solver: str | None = None,
    init: str | None = None,
    iterations: int | None = None,
    final_objective: float | None = None,
    converged: bool | None = None,
):
    num_pixels = {len(v) for v in params.v.values()}
    if len(num_pixels) != 1:
        raise CmrError("params hold v vectors of differing lengths")
    doc = {
        "format_version": FORMAT_VERSION,
        "B": params.num_bands,
        "P": num_pixels.pop(),
        "w": [float(x) for x in params.w],
        "v": {sid: [float(x) for x in vec] for sid, vec in params.v.items()},
        "lambda": float(lam),
        "solver": solver,
        "init": init,
        "iterations": iterations,
        "final_objective": final_objective,
        "converged": converged,
    }
    _write_json(path, doc)


def read_params(path) -> ParamsDocument:
    """Load a parameter document, enforcing the unit-norm contract on w.

    A norm within 1e-6 of 1 passes untouched; within 1e-3 it is renormalized
    with a warning; anything farther off is rejected.
    """
    doc = _read_json(path)
    for key in ("format_version", "B", "P", "w", "v", "lambda"):
        if key not in doc:
            raise CmrError(f"{path}: params document is missing {key!r}")
    if doc["format_version"] != FORMAT_VERSION:
        raise CmrError(f"{path}: unsupported format_version {doc['format_version']}")
    w = np.asarray(doc["w"], dtype=float)
    if w.shape != (int(doc["B"]),):
        raise CmrError(f"{path}: w has length {w.shape[0]}, expected B={doc['B']}")
    norm = float(np.linalg.norm(w))
    if abs(norm - 1.0) > 1e-3:
        raise CmrError(f"{path}: ||w|| = {norm:.6g} is too far from 1 to load")
    if abs(norm - 1.0) > 1e-6:
        warnings.warn(f"{path}: renormalizing w with ||w|| = {norm:.9g}", stacklevel=2)
        w = w / norm
    v = {}
    for sid, vec in doc["v"].items():
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (int(doc["P"]),):
            raise CmrError(
                f"{path}: v[{sid!r}] has length {vec.shape[0]}, expected P={doc['P']}"
            )
        v[sid] = vec
    return ParamsDocument(
        params=CmrParams(w=w, v=v),
        num_bands=int(doc["B"]),
        num_pixels=int(doc["P"]),
        lam=float(doc["lambda"]),
        solver=doc.get("solver"),
        init=doc.get("init"),
        iterations=doc.get("iterations"),
        final_objective=doc.get("final_objective"),
        converged=doc.get("converged"),
    )


def write_phase_csv(result: PhaseDiagramResult, path):
    """Grid rows ascending by (I, T), fractions at full precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PHASE_CSV_HEADER)
        for row in summarize(result):
            writer.writerow(
                [
                    row["I"],
                    row["T"],
                    row["trials"],
                    row["successes"],
                    row["errors"],
                    _fmt(row["fraction"]),
                    _fmt(row["mean_sq_corr"]),
                ]
            )


def read_phase_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(PHASE_CSV_HEADER):
            raise CmrError(f"{path}: unexpected phase CSV header {header}")
        rows = []
        for row in reader:
            rows.append(
                {
                    "I": int(row[0]),
                    "T": int(row[1]),
                    "trials": int(row[2]),
                    "successes": int(row[3]),
                    "errors": int(row[4]),
                    "fraction": float(row[5]),
                    "mean_sq_corr": float(row[6]),
                }
            )
    return rows


def write_predictions_csv(path, rows: Sequence[tuple[str, str, float, float]]):
    """Rows of (site_id, sample_id, label, prediction)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_CSV_HEADER)
        for site_id, sample_id, y, y_hat in rows:
            writer.writerow([site_id, sample_id, _fmt(y), _fmt(y_hat)])


def write_crossval_report(path, cmr_report, ndwi_report, extra: dict | None = None):
    def report_doc(report):
        return {
            "model_tag": report.model_tag,
            "folds": report.folds,
            "repeats": report.repeats,
            "aggregate": {
                "train_nmse": report.aggregate[0],
                "test_nmse": report.aggregate[1],
            },
            "per_site": {
                sid: {"train_nmse": tr, "test_nmse": te}
                for sid, (tr, te) in report.per_site_mse.items()
            },
        }

    doc = {
        "format_version": FORMAT_VERSION,
        "cmr": report_doc(cmr_report),
        "ndwi": report_doc(ndwi_report),
    }
    if extra:
        doc.update(extra)
    _write_json(path, doc)


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise CmrError(f"{path}: invalid JSON ({exc})") from None
