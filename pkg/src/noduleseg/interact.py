"""User-interaction points: simulated from a ground-truth mask, or validated from real input.

The simulated stroke mimics a radiologist marking the nodule diameter: on the
axial slice through the mask centroid, take the two boundary pixels that are
farthest apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import PointPair
from .volgrid import VolumeGeometry


class DegenerateStrokeError(ValueError):
    """The chosen slice has fewer than two boundary pixels to place a stroke on."""


@dataclass(frozen=True)
class InteractionSource:
    tag: str  # "simulated" | "user"
    pair: PointPair

    def __post_init__(self):
        if self.tag not in ("simulated", "user"):
            raise ValueError(f"unknown interaction tag {self.tag!r}")


def _slice_boundary(slice2d: np.ndarray) -> np.ndarray:
    """(n, 2) coords of foreground pixels with a 4-connected background neighbor in-slice."""
    v = slice2d.astype(bool)
    padded = np.pad(v, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1]
        & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(v & ~interior)


def simulate_endpoints(mask) -> PointPair:
    """Two most distant boundary pixels of the axial slice through the mask centroid.

    Deterministic: among equally distant pairs the lexicographically smallest
    (y, x) first point wins, then the smallest second point. Raises on an
    empty mask or when the slice offers fewer than two boundary pixels.
    """
    values = np.asarray(getattr(mask, "values", mask))
    if not values.any():
        raise ValueError("cannot simulate endpoints on an empty mask")
    coords = np.argwhere(values)
    z = int(math.floor(coords[:, 0].mean() + 0.5))
    z = min(max(z, 0), values.shape[0] - 1)
    boundary = _slice_boundary(values[z])
    if len(boundary) < 2:
        raise DegenerateStrokeError(
            f"slice {z} has {len(boundary)} boundary pixel(s); need at least 2"
        )
    # lexicographic order makes the first maximal pair the canonical one
    order = np.lexsort((boundary[:, 1], boundary[:, 0]))
    pts = boundary[order].astype(np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    iu = np.triu_indices(len(pts), k=1)
    flat = d2[iu]
    best = int(np.argmax(flat))  # argmax keeps the first (lex-smallest) maximal pair
    i, j = iu[0][best], iu[1][best]
    p0 = (float(z), float(pts[i, 0]), float(pts[i, 1]))
    p1 = (float(z), float(pts[j, 0]), float(pts[j, 1]))
    return PointPair(p0, p1)


def validate_user_points(p0, p1, geometry: VolumeGeometry) -> PointPair:
    """Clamp user coordinates into the grid and reject coincident or non-finite points."""
    out = []
    for pt in (p0, p1):
        pt = tuple(float(c) for c in pt)
        if len(pt) != 3 or not all(np.isfinite(pt)):
            raise ValueError(f"point {pt} has non-finite or malformed coordinates")
        out.append(tuple(
            min(max(c, 0.0), d - 1.0) for c, d in zip(pt, geometry.dims)
        ))
    if out[0] == out[1]:
        raise ValueError(f"points coincide after clamping: {out[0]}")
    return PointPair(out[0], out[1])
