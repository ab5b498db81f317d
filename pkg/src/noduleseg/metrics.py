"""Evaluation machinery: overlap and surface-distance metrics plus stratified reports.

Surface elements are foreground voxels with at least one 6-connected
background neighbor (out-of-bounds counts as background); surface distances
are measured between voxel centers in mm.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .volgrid import BinaryMask

TEXTURE_CLASSES = ("solid", "sub-solid", "non-solid")


def _mask_values(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m))


def _spacing(m) -> tuple[float, float, float]:
    geo = getattr(m, "geometry", None)
    return geo.spacing_mm if geo is not None else (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class AnnotationSet:
    """One nodule's expert masks on a shared geometry; list length is the agreement level."""

    masks: list[BinaryMask]

    def __post_init__(self):
        if len(self.masks) < 1:
            raise ValueError("an annotation set needs at least one mask")
        geo = self.masks[0].geometry
        for m in self.masks[1:]:
            if m.geometry != geo:
                raise ValueError("all annotation masks must share one geometry")

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def geometry(self):
        return self.masks[0].geometry


@dataclass
class EvalRecord:
    nodule_id: str
    iou: float
    asd_mm: float
    radius_mm: float
    texture: str
    corrected: bool
    iou_improvement: float = 0.0
    initial_iou: float = float("nan")
    initial_asd_mm: float = float("nan")

    def __post_init__(self):
        if not (math.isnan(self.iou) or 0.0 <= self.iou <= 1.0):
            raise ValueError(f"iou out of range: {self.iou}")
        if not (math.isnan(self.asd_mm) or self.asd_mm >= 0.0):
            raise ValueError(f"asd_mm negative: {self.asd_mm}")
        if not self.radius_mm > 0:
            raise ValueError(f"radius_mm must be positive: {self.radius_mm}")
        if self.texture not in TEXTURE_CLASSES:
            raise ValueError(f"unknown texture class {self.texture!r}")


def iou(a, b) -> float:
    """3D intersection over union of two binary masks. Undefined (raises) when both are empty."""
    av = _mask_values(a).astype(bool)
    bv = _mask_values(b).astype(bool)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    union = int(np.logical_or(av, bv).sum())
    if union == 0:
        raise ValueError("IoU undefined for two empty masks")
    inter = int(np.logical_and(av, bv).sum())
    return inter / union


def surface_voxels(mask) -> np.ndarray:
    """(n, 3) integer coordinates of foreground voxels touching background 6-connectedly."""
    v = _mask_values(mask).astype(bool)
    if not v.any():
        raise ValueError("surface of an empty mask is undefined")
    padded = np.pad(v, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    surf = v & ~interior
    return np.argwhere(surf)


def asd(a, b) -> float:
    """Average surface distance in mm: symmetric mean of nearest surface-to-surface distances."""
    sa = surface_voxels(a).astype(np.float64)
    sb = surface_voxels(b).astype(np.float64)
    spacing = np.asarray(_spacing(a), dtype=np.float64)
    if tuple(_spacing(a)) != tuple(_spacing(b)):
        raise ValueError("masks must share spacing for a surface distance in mm")
    pa = sa * spacing
    pb = sb * spacing
    d_ab = cKDTree(pb).query(pa, k=1)[0]
    d_ba = cKDTree(pa).query(pb, k=1)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def interobserver_iou(ann: AnnotationSet) -> float:
    """Mean IoU over all ordered annotator pairs (each expert as truth vs the rest)."""
    if len(ann) < 2:
        raise ValueError("inter-observer agreement needs at least two annotations")
    scores = []
    for i, truth in enumerate(ann.masks):
        for j, pred in enumerate(ann.masks):
            if i != j:
                scores.append(iou(truth, pred))
    return float(np.mean(scores))


def mean_iou_vs_annotators(pred, ann: AnnotationSet) -> float:
    """Average IoU of one prediction against every expert mask of the nodule."""
    return float(np.mean([iou(m, pred) for m in ann.masks]))


def corrected_best_iou(ann: AnnotationSet, initial, corrected: list) -> float:
    """Keep-or-replace score: per annotator the better of initial and corrected, then averaged."""
    if len(corrected) != len(ann):
        raise ValueError(f"need one corrected mask per annotator ({len(ann)}), got {len(corrected)}")
    best = [
        max(iou(truth, cr), iou(truth, initial))
        for truth, cr in zip(ann.masks, corrected)
    ]
    return float(np.mean(best))


def equivalent_radius(ann: AnnotationSet) -> float:
    """Mean over annotators of the radius of the equal-volume sphere, in mm."""
    radii = []
    for m in ann.masks:
        count = int(_mask_values(m).sum())
        if count == 0:
            raise ValueError("equivalent radius undefined for an empty mask")
        vol = count * m.geometry.voxel_volume_mm3
        radii.append((3.0 * vol / (4.0 * math.pi)) ** (1.0 / 3.0))
    return float(np.mean(radii))


def texture_from_scores(scores) -> str:
    """Map averaged annotator texture scores (1..5) to a class: <=2 non-solid, =5 solid, else sub-solid."""
    mean = float(np.mean(np.asarray(scores, dtype=float)))
    if mean <= 2.0:
        return "non-solid"
    if mean == 5.0:
        return "solid"
    return "sub-solid"


# --- stratified reporting ----------------------------------------------------

CSV_HEADER = ["nodule_id", "iou", "asd_mm", "radius_mm", "texture", "corrected"]


def write_records_csv(records: list[EvalRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.nodule_id, f"{r.iou:.6f}", f"{r.asd_mm:.6f}",
                             f"{r.radius_mm:.6f}", r.texture, int(r.corrected)])
    return path


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def summarize(records: list[EvalRecord]) -> dict:
    """Aggregate records into the JSON summary: overall means plus texture and 1 mm radius bins."""
    per_texture = {}
    for tex in TEXTURE_CLASSES:
        rs = [r for r in records if r.texture == tex]
        if rs:
            per_texture[tex] = {
                "n": len(rs),
                "mean_iou": _nanmean([r.iou for r in rs]),
                "mean_asd_mm": _nanmean([r.asd_mm for r in rs]),
                "mean_iou_improvement": _nanmean([r.iou_improvement for r in rs]),
            }
    per_radius = {}
    if records:
        top = int(math.floor(max(r.radius_mm for r in records))) + 1
        for lo in range(0, top):
            rs = [r for r in records if lo <= r.radius_mm < lo + 1]
            if rs:
                per_radius[f"{lo}-{lo + 1}"] = {
                    "n": len(rs),
                    "mean_iou": _nanmean([r.iou for r in rs]),
                    "mean_iou_improvement": _nanmean([r.iou_improvement for r in rs]),
                }
    improved = [r for r in records if r.iou_improvement > 0.0]
    return {
        "n_nodules": len(records),
        "mean_iou": _nanmean([r.iou for r in records]),
        "mean_asd_mm": _nanmean([r.asd_mm for r in records]),
        "pct_improved": 100.0 * len(improved) / len(records) if records else float("nan"),
        "per_texture": per_texture,
        "per_radius_bin": per_radius,
    }


def write_summary_json(summary: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return path
