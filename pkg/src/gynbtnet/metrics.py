"""Overlap and surface-distance metrics for label maps, in physical millimetres."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .phantom import STRUCTURES
from .volume import LabelMap

BRUTE_FORCE_LIMIT = 5000
METRICS = ("dsc", "hd95_mm", "asd_mm")


class GeometryError(ValueError):
    pass


class UndefinedMetric(ValueError):
    """Raised when a distance metric is requested for an empty surface."""


def _check_geometry(a: LabelMap, b: LabelMap):
    if a.dims != b.dims or a.spacing != b.spacing or a.origin != b.origin:
        raise GeometryError(f"label maps differ in geometry: {a.dims}/{a.spacing} vs {b.dims}/{b.spacing}")


def dsc(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise GeometryError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface_voxels(region) -> np.ndarray:
    """Boolean mask of region voxels with a 6-neighbour outside the region (edges count as outside)."""
    r = np.pad(np.asarray(region, dtype=bool), 1)
    interior = (r[1:-1, 1:-1, 1:-1]
                & r[:-2, 1:-1, 1:-1] & r[2:, 1:-1, 1:-1]
                & r[1:-1, :-2, 1:-1] & r[1:-1, 2:, 1:-1]
                & r[1:-1, 1:-1, :-2] & r[1:-1, 1:-1, 2:])
    return r[1:-1, 1:-1, 1:-1] & ~interior


def extract_surface(labels, label_id, spacing=None) -> np.ndarray:
    """Physical coordinates ``(n, 3)`` of the surface voxels of ``label_id``."""
    if isinstance(labels, LabelMap):
        spacing = labels.spacing if spacing is None else spacing
        labels = labels.labels
    spacing = np.asarray((1.0, 1.0, 1.0) if spacing is None else spacing, dtype=np.float64)
    idx = np.argwhere(surface_voxels(np.asarray(labels) == label_id))
    return idx.astype(np.float64) * spacing


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a``, the Euclidean distance to the closest point of ``b``."""
    if len(a) == 0 or len(b) == 0:
        raise UndefinedMetric("distance to an empty point set")
    if len(a) >= BRUTE_FORCE_LIMIT or len(b) >= BRUTE_FORCE_LIMIT:
        return cKDTree(b).query(a, k=1)[0]
    out = np.empty(len(a))
    chunk = max(1, 2_000_000 // len(b))
    for s in range(0, len(a), chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.sqrt(np.min(np.einsum("ijk,ijk->ij", diff, diff), axis=1))
    return out


def percentile95(values) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = 0.95 * (len(v) - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (rank - lo) * (v[hi] - v[lo]))


def hd95(a: np.ndarray, b: np.ndarray) -> float:
    return max(percentile95(nearest_distances(a, b)), percentile95(nearest_distances(b, a)))


def asd(a: np.ndarray, b: np.ndarray) -> float:
    dab = nearest_distances(a, b)
    dba = nearest_distances(b, a)
    return float((dab.sum() + dba.sum()) / (len(a) + len(b)))


@dataclass
class StructureResult:
    label: int
    name: str
    dsc: float
    hd95_mm: float | None
    asd_mm: float | None
    pred_voxels: int
    gt_voxels: int

    @property
    def undefined(self):
        return self.hd95_mm is None


@dataclass
class MetricsReport:
    case_id: str
    spacing: tuple
    structures: list = field(default_factory=list)

    def to_dict(self):
        rows = []
        for s in self.structures:
            d = asdict(s)
            d["undefined"] = s.undefined
            rows.append(d)
        return {"case_id": self.case_id, "spacing": list(self.spacing), "structures": rows}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        try:
            rows = [StructureResult(**{k: v for k, v in r.items() if k != "undefined"})
                    for r in d["structures"]]
            return cls(str(d["case_id"]), tuple(d["spacing"]), rows)
        except (KeyError, TypeError) as e:
            raise ValueError(f"not a metrics report: {e}") from None

    def value(self, name, metric):
        for s in self.structures:
            if s.name == name:
                return getattr(s, metric)
        raise KeyError(name)


def evaluate_case(pred: LabelMap, gt: LabelMap, case_id="case", names=STRUCTURES) -> MetricsReport:
    _check_geometry(pred, gt)
    if pred.num_classes != gt.num_classes:
        raise GeometryError("label maps disagree on num_classes")
    report = MetricsReport(str(case_id), tuple(float(s) for s in gt.spacing))
    for label in range(1, gt.num_classes):
        p = pred.labels == label
        g = gt.labels == label
        name = names[label - 1] if label - 1 < len(names) else f"label{label}"
        sp = extract_surface(p, 1, gt.spacing)
        sg = extract_surface(g, 1, gt.spacing)
        if len(sp) and len(sg):
            h, a = hd95(sp, sg), asd(sp, sg)
        else:
            h = a = None
        report.structures.append(StructureResult(label, name, dsc(p, g), h, a, int(p.sum()), int(g.sum())))
    return report


def aggregate(reports) -> list:
    """Rows ``(structure, metric, mean, sd, n, undefined_count)``; sd is the sample SD."""
    rows = []
    if not reports:
        return rows
    for s in reports[0].structures:
        for metric in METRICS:
            vals = [r.value(s.name, metric) for r in reports]
            defined = [v for v in vals if v is not None]
            n = len(defined)
            mean = float(np.mean(defined)) if n else None
            sd = float(np.std(defined, ddof=1)) if n > 1 else (0.0 if n else None)
            rows.append({"structure": s.name, "metric": metric, "mean": mean, "sd": sd, "n": n,
                         "undefined_count": len(vals) - n})
    return rows


def write_aggregate_csv(rows, path):
    cols = ["structure", "metric", "mean", "sd", "n", "undefined_count"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in cols})
