"""Volume- and surface-based segmentation metrics, lesion scale binning, and
stratified delta reports comparing two evaluation runs bin by bin.

Conventions (recorded in every report): DSC and NSD score 100 when both masks
are empty, recall is undefined for an empty ground truth, and the NSD boundary
is the set of foreground voxels with at least one six-connected background
neighbor, with the grid border counting as background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volgrid import BinaryMask3D

METRICS = ("dsc", "nsd", "recall")
BIN_NAMES = ("Micro", "Small", "Medium", "Mass")
BIN_RANGES_MM = {
    "Micro": "(0, 10]",
    "Small": "(10, 20]",
    "Medium": "(20, 30)",
    "Mass": "[30, inf)",
}


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. recall with empty gt)."""


def _check_shapes(pred: BinaryMask3D, gt: BinaryMask3D) -> None:
    if pred.dims != gt.dims:
        raise ValueError(f"mask shapes differ: {pred.dims} vs {gt.dims}")


def dsc(pred: BinaryMask3D, gt: BinaryMask3D) -> float:
    """Dice similarity coefficient in percent; 100 when both masks are empty."""
    _check_shapes(pred, gt)
    p = int(pred.data.sum())
    g = int(gt.data.sum())
    if p + g == 0:
        return 100.0
    inter = int((pred.data & gt.data).sum())
    return 100.0 * 2.0 * inter / (p + g)


def recall(pred: BinaryMask3D, gt: BinaryMask3D) -> float:
    """Voxel sensitivity in percent; undefined for an empty ground truth."""
    _check_shapes(pred, gt)
    g = int(gt.data.sum())
    if g == 0:
        raise UndefinedMetricError("recall is undefined for an empty ground truth")
    inter = int((pred.data & gt.data).sum())
    return 100.0 * inter / g


def boundary_voxels(mask: BinaryMask3D) -> np.ndarray:
    """Foreground voxels with at least one six-connected background neighbor;
    the grid border counts as background. Returns a boolean array."""
    data = mask.data
    padded = np.pad(data, 1, mode="constant", constant_values=False)
    interior = np.ones_like(data)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return data & ~interior


def nsd(pred: BinaryMask3D, gt: BinaryMask3D, tolerance_mm: float = 1.0,
        spacing: Tuple[float, float, float] | None = None) -> float:
    """Normalized surface dice in percent: the fraction of boundary voxels of
    each mask lying within ``tolerance_mm`` (Euclidean, in mm) of the other
    mask's boundary. Both masks empty scores 100; exactly one empty scores 0.
    """
    _check_shapes(pred, gt)
    if spacing is None:
        spacing = gt.spacing
    bp = boundary_voxels(pred)
    bg = boundary_voxels(gt)
    np_count = int(bp.sum())
    ng_count = int(bg.sum())
    if np_count == 0 and ng_count == 0:
        return 100.0
    if np_count == 0 or ng_count == 0:
        return 0.0
    # distance of every voxel to the nearest boundary voxel of the other mask
    dist_to_bg = ndimage.distance_transform_edt(~bg, sampling=spacing)
    dist_to_bp = ndimage.distance_transform_edt(~bp, sampling=spacing)
    close_p = int((dist_to_bg[bp] <= tolerance_mm).sum())
    close_g = int((dist_to_bp[bg] <= tolerance_mm).sum())
    return 100.0 * (close_p + close_g) / (np_count + ng_count)


def scale_bin(diameter_mm: float) -> str:
    """Bin a lesion diameter: Micro (0,10], Small (10,20], Medium (20,30),
    Mass [30,inf). Exactly 30 mm is a mass."""
    d = float(diameter_mm)
    if d <= 0:
        raise ValueError(f"diameter must be positive, got {d}")
    if d <= 10.0:
        return "Micro"
    if d <= 20.0:
        return "Small"
    if d < 30.0:
        return "Medium"
    return "Mass"


@dataclass
class SampleMetrics:
    sample_id: str
    diameter_mm: float
    bin: str
    dsc: float
    nsd: float
    recall: float

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "diameter_mm": self.diameter_mm,
            "bin": self.bin,
            "dsc": self.dsc,
            "nsd": self.nsd,
            "recall": self.recall,
        }


@dataclass
class MetricReport:
    """Per-sample metrics plus per-bin means; optionally per-bin deltas
    against a baseline run."""

    samples: List[SampleMetrics]
    tolerance_mm: float = 1.0
    run_name: str = ""
    frozen_sha: str = ""
    conventions: dict = field(default_factory=lambda: {
        "both_empty_dsc": 100.0,
        "both_empty_nsd": 100.0,
        "empty_gt_recall": "undefined",
    })
    deltas: Optional[Dict[str, Dict[str, Optional[float]]]] = None
    baseline_name: str = ""

    def sample_ids(self) -> List[str]:
        return [s.sample_id for s in self.samples]

    def bin_means(self) -> Dict[str, Dict[str, Optional[float]]]:
        """metric -> mean per bin; None for bins with no samples."""
        out: Dict[str, Dict[str, Optional[float]]] = {}
        for name in BIN_NAMES:
            members = [s for s in self.samples if s.bin == name]
            if members:
                out[name] = {m: float(np.mean([getattr(s, m) for s in members]))
                             for m in METRICS}
                out[name]["count"] = len(members)
            else:
                out[name] = {m: None for m in METRICS}
                out[name]["count"] = 0
        return out

    def scatter_records(self) -> List[dict]:
        """Per-sample (diameter, recall) pairs for scale-vs-recall plots."""
        return [{"sample_id": s.sample_id, "diameter_mm": s.diameter_mm,
                 "recall": s.recall} for s in self.samples]


def evaluate_run(pairs: Sequence[Tuple[str, float, BinaryMask3D, BinaryMask3D]],
                 tolerance_mm: float = 1.0, run_name: str = "",
                 frozen_sha: str = "") -> MetricReport:
    """Score (sample_id, diameter_mm, pred, gt) tuples into a report."""
    samples = []
    for sample_id, diameter, pred, gt in pairs:
        samples.append(SampleMetrics(
            sample_id=sample_id,
            diameter_mm=float(diameter),
            bin=scale_bin(diameter),
            dsc=dsc(pred, gt),
            nsd=nsd(pred, gt, tolerance_mm),
            recall=recall(pred, gt),
        ))
    return MetricReport(samples=samples, tolerance_mm=tolerance_mm,
                        run_name=run_name, frozen_sha=frozen_sha)


def stratified_delta(run_a: MetricReport, run_b: MetricReport) -> MetricReport:
    """Per-bin mean(run_b) - mean(run_a) for every metric; bins with no
    samples report None rather than zero. Both runs must cover the same
    sample set."""
    if sorted(run_a.sample_ids()) != sorted(run_b.sample_ids()):
        raise ValueError("stratified_delta requires identical sample sets")
    means_a = run_a.bin_means()
    means_b = run_b.bin_means()
    deltas: Dict[str, Dict[str, Optional[float]]] = {}
    for name in BIN_NAMES:
        row: Dict[str, Optional[float]] = {}
        for m in METRICS:
            a, b = means_a[name][m], means_b[name][m]
            row[m] = (b - a) if (a is not None and b is not None) else None
        row["count"] = means_b[name]["count"]
        deltas[name] = row
    return MetricReport(samples=list(run_b.samples), tolerance_mm=run_b.tolerance_mm,
                        run_name=run_b.run_name, frozen_sha=run_b.frozen_sha,
                        conventions=dict(run_b.conventions),
                        deltas=deltas, baseline_name=run_a.run_name)


def _fmt(value: Optional[float]) -> str:
    return "   --" if value is None else f"{value:8.3f}"


def means_table(reports: Sequence[MetricReport]) -> str:
    """Text table of per-bin mean DSC/NSD/recall for one or more runs."""
    lines = []
    header = f"{'Scale':<8}{'n':>5}" + "".join(f"{m.upper():>10}" for m in METRICS)
    for rep in reports:
        lines.append(f"run: {rep.run_name}  (tau={rep.tolerance_mm} mm, "
                     f"frozen={rep.frozen_sha[:12]})")
        lines.append(header)
        means = rep.bin_means()
        for name in BIN_NAMES:
            row = means[name]
            cells = "".join(f"{_fmt(row[m]):>10}" for m in METRICS)
            lines.append(f"{name:<8}{row['count']:>5}{cells}")
        lines.append("")
    return "\n".join(lines)


def delta_table(delta: MetricReport) -> str:
    """Text table of per-bin metric deltas against the baseline run."""
    if delta.deltas is None:
        raise ValueError("report carries no deltas")
    lines = [f"delta: {delta.run_name} - {delta.baseline_name}",
             f"{'Scale':<8}{'n':>5}" + "".join(f"{'d' + m.upper():>10}" for m in METRICS)]
    for name in BIN_NAMES:
        row = delta.deltas[name]
        cells = "".join(f"{_fmt(row[m]):>10}" for m in METRICS)
        lines.append(f"{name:<8}{row['count']:>5}{cells}")
    lines.append("")
    return "\n".join(lines)


def write_records(report: MetricReport, path) -> None:
    """Machine-readable report: one JSON object per line, header line first."""
    header = {
        "run_name": report.run_name,
        "tolerance_mm": report.tolerance_mm,
        "frozen_sha": report.frozen_sha,
        "conventions": report.conventions,
        "bin_means": report.bin_means(),
        "deltas": report.deltas,
        "baseline_name": report.baseline_name,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for s in report.samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")


def read_records(path) -> MetricReport:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    header = lines[0]["header"]
    samples = [SampleMetrics(**{k: rec[k] for k in
                                ("sample_id", "diameter_mm", "bin", "dsc", "nsd", "recall")})
               for rec in lines[1:]]
    return MetricReport(samples=samples, tolerance_mm=header["tolerance_mm"],
                        run_name=header["run_name"], frozen_sha=header["frozen_sha"],
                        conventions=header["conventions"], deltas=header["deltas"],
                        baseline_name=header.get("baseline_name", ""))
