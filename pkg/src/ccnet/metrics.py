"""Overlap and surface-distance metrics.

Surface distances are pooled over both directions (prediction to reference and
reference to prediction) before taking the mean (ASD) or the 95th percentile
(95HD, linear interpolation between order statistics, as ``numpy.percentile``
with ``method="linear"``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
METRIC_NAMES = ("dice", "jaccard", "hd95", "asd")


class EmptySurfaceError(ValueError):
    """A surface distance is undefined because one mask is empty."""


def _masks(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    a, b = _masks(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def jaccard(a, b) -> float:
    a, b = _masks(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a face neighbour in the background or outside the grid."""
    mask = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(mask, FACE_CONNECTIVITY, border_value=0)
    return mask & ~eroded


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled distances from each surface voxel of one mask to the other mask's surface."""
    a, b = _masks(a, b)
    sa, sb = surface_voxels(a), surface_voxels(b)
    if not sa.any() or not sb.any():
        raise EmptySurfaceError("surface distance undefined for an empty mask")
    spacing = tuple(float(s) for s in spacing)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    return np.concatenate([dist_to_b[sa], dist_to_a[sb]])


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.percentile(surface_distances(a, b, spacing), 95, method="linear"))


def asd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(surface_distances(a, b, spacing).mean())


@dataclass
class CaseResult:
    id: str
    dice: float
    jaccard: float
    hd95: float | None
    asd: float | None

    @property
    def surface_defined(self) -> bool:
        return self.hd95 is not None and self.asd is not None


def evaluate_case(pred, ref, spacing=(1.0, 1.0, 1.0), case_id: str = "") -> CaseResult:
    try:
        d = surface_distances(pred, ref, spacing)
        h, s = float(np.percentile(d, 95, method="linear")), float(d.mean())
    except EmptySurfaceError:
        h = s = None
    return CaseResult(case_id, dice(pred, ref), jaccard(pred, ref), h, s)


def aggregate(results: Sequence[CaseResult]) -> dict:
    defined = [r for r in results if r.surface_defined]
    out = {"n": len(results), "skipped": len(results) - len(defined)}
    for name in ("dice", "jaccard"):
        vals = [getattr(r, name) for r in results]
        out[f"{name}_mean"] = float(np.mean(vals)) if vals else math.nan
    for name in ("hd95", "asd"):
        vals = [getattr(r, name) for r in defined]
        out[f"{name}_mean"] = float(np.mean(vals)) if vals else None
    return out


def evaluate_corpus(predictions: Mapping[str, np.ndarray], references: Mapping[str, np.ndarray],
                    spacings: Mapping[str, Sequence[float]] | None = None):
    """Score every reference case; a missing prediction is an error.

    ``spacings`` maps case id to voxel spacing; omit it to report distances in voxels.
    """
    results = []
    for cid, ref in references.items():
        if cid not in predictions:
            raise KeyError(f"no prediction for case {cid!r}")
        spacing = spacings[cid] if spacings is not None else (1.0, 1.0, 1.0)
        results.append(evaluate_case(predictions[cid], ref, spacing, cid))
    return results, aggregate(results)


def write_results_csv(path, results: Sequence[CaseResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("id",) + METRIC_NAMES)
        for r in results:
            writer.writerow([r.id] + ["" if getattr(r, m) is None else repr(getattr(r, m))
                                      for m in METRIC_NAMES])
    return path


def read_results_csv(path) -> list[CaseResult]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [CaseResult(r["id"], *(float(r[m]) if r[m] != "" else None for m in METRIC_NAMES))
            for r in rows]


def write_aggregate_json(path, agg: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(agg, indent=2))
    return path
