"""Two-point attraction weight maps.

Each user point anchors a radial unit field (the normalized gradient of a
sphere centered on the point) whose magnitude decays with distance as
``1 / d**p``; the two points get opposite signs so their sum behaves like the
field of a charge dipole, strong along the segment joining the points. The
voxelwise norm of the summed field, rescaled to peak at 1, is the weight map
consumed by the correction network and by the attraction loss term.

Distances are measured in voxel units on the (isotropic) grid the network
sees, not in mm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import VolumeGeometry


@dataclass(frozen=True)
class FieldParams:
    """decay_p sets how fast magnitude falls off with distance; epsilon guards d=0."""

    decay_p: float = 0.44
    epsilon: float = 1e-3

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class PointPair:
    """The two end-points of the user's diameter stroke, continuous (z, y, x) voxel coords."""

    p0: tuple[float, float, float]
    p1: tuple[float, float, float]

    def __post_init__(self):
        p0 = tuple(float(c) for c in self.p0)
        p1 = tuple(float(c) for c in self.p1)
        if not all(np.isfinite(p0)) or not all(np.isfinite(p1)):
            raise ValueError("point coordinates must be finite")
        if p0 == p1:
            raise ValueError("the two points must be distinct")
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "p1", p1)

    def require_inside(self, geometry: VolumeGeometry) -> None:
        for pt in (self.p0, self.p1):
            for c, d in zip(pt, geometry.dims):
                if not 0.0 <= c <= d - 1:
                    raise ValueError(f"point {pt} outside grid bounds {geometry.dims}")


@dataclass(frozen=True)
class WeightMap:
    """Per-voxel attraction magnitude in [0, 1]; all-zero when no points were given."""

    geometry: VolumeGeometry
    values: np.ndarray
    decay_p: float = 0.44

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32).reshape(self.geometry.dims))
        if v.size and (v.min() < 0.0 or v.max() > 1.0 + 1e-6):
            raise ValueError("weight map values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _index_grid(geometry: VolumeGeometry) -> np.ndarray:
    axes = [np.arange(d, dtype=np.float64) for d in geometry.dims]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([zz, yy, xx])


def unit_gradient(center, geometry: VolumeGeometry) -> np.ndarray:
    """Unit vectors pointing away from ``center`` at every voxel; zero at the center itself.

    Returns shape ``(3, nz, ny, nx)`` with components in (z, y, x) order.
    """
    center = np.asarray(center, dtype=np.float64)
    diff = _index_grid(geometry) - center.reshape(3, 1, 1, 1)
    dist = np.sqrt((diff * diff).sum(axis=0))
    safe = np.where(dist == 0.0, 1.0, dist)
    field = diff / safe
    field[:, dist == 0.0] = 0.0
    return field


def point_distances(center, geometry: VolumeGeometry) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    diff = _index_grid(geometry) - center.reshape(3, 1, 1, 1)
    return np.sqrt((diff * diff).sum(axis=0))


def point_field(center, sign_a: int, params: FieldParams, geometry: VolumeGeometry) -> np.ndarray:
    """Radial field of one point: ``(-1)**a * u(v) / max(d, eps)**p``.

    ``a = 0`` points away from the center, ``a = 1`` toward it; ``p = 0``
    keeps unit magnitude everywhere.
    """
    if sign_a not in (0, 1):
        raise ValueError("sign_a must be 0 or 1")
    u = unit_gradient(center, geometry)
    d = point_distances(center, geometry)
    mag = np.maximum(d, params.epsilon) ** (-params.decay_p)
    field = u * mag
    if sign_a == 1:
        field = -field
    return field


def summed_field_norm(pair: PointPair, params: FieldParams, geometry: VolumeGeometry) -> np.ndarray:
    """Un-normalized ``|Q_0 + Q_1|``; kept separate so translation equivariance is testable."""
    w = point_field(pair.p0, 0, params, geometry) + point_field(pair.p1, 1, params, geometry)
    return np.sqrt((w * w).sum(axis=0))


def attraction_map(pair: PointPair | None, params: FieldParams, geometry: VolumeGeometry) -> WeightMap:
    """The weight map: norm of the two opposite-sign point fields, peak rescaled to 1.

    ``pair=None`` (no user interaction) yields the all-zero map. Raises if the
    two points round to the same voxel of the evaluation grid, where the two
    fields cancel and the map degenerates.
    """
    if pair is None:
        return WeightMap(geometry, np.zeros(geometry.dims, dtype=np.float32), params.decay_p)
    pair.require_inside(geometry)
    r0 = tuple(int(np.floor(c + 0.5)) for c in pair.p0)
    r1 = tuple(int(np.floor(c + 0.5)) for c in pair.p1)
    if r0 == r1:
        raise ValueError(f"points {pair.p0} and {pair.p1} coincide on the evaluation grid")
    norm = summed_field_norm(pair, params, geometry)
    peak = norm.max()
    if peak <= 0.0:
        raise ValueError("degenerate attraction field (zero everywhere)")
    return WeightMap(geometry, (norm / peak).astype(np.float32), params.decay_p)
