"""Voxel grids with physical spacing, intensity preprocessing and the IWV1 on-disk format.

Conventions used everywhere in this package:

* arrays are indexed ``(z, y, x)`` with z outermost (C order, so the flat
  layout on disk is z-major);
* a voxel's value is the sample at the voxel *center*, whose world position
  is ``origin_mm + index * spacing_mm``;
* scalar images and soft masks are float32, binary masks are uint8 {0, 1}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HU_LO = -1000.0
HU_HI = 400.0


class VolumeFormatError(ValueError):
    """Malformed IWV1 header or payload."""


def _locked(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VolumeGeometry:
    """Grid dimensions plus the physical placement of voxel centers.

    dims are ``(nz, ny, nx)``, spacing and origin are per-axis mm values in
    the same (z, y, x) order.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) != d or d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing_mm) != 3 or any(not (s > 0) for s in self.spacing_mm):
            raise ValueError(f"spacing_mm must be three positive reals, got {self.spacing_mm}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing_mm
        return sz * sy * sx

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical size of the covered box (each voxel owns one spacing of extent)."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing_mm))

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin_mm) + idx * np.asarray(self.spacing_mm)

    def world_to_index(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=float)
        return (pos - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)


@dataclass(frozen=True)
class ScalarVolume:
    """A 3D scalar image. Values may be raw HU or normalized [0, 1] intensities."""

    geometry: VolumeGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).reshape(self.geometry.dims)
        object.__setattr__(self, "values", _locked(v))


@dataclass(frozen=True)
class BinaryMask:
    """A strictly {0, 1} voxel mask sharing geometry with its image."""

    geometry: VolumeGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values).reshape(self.geometry.dims)
        if v.dtype != np.uint8:
            u = v.astype(np.uint8)
            if not np.array_equal(u, v):
                raise ValueError("mask values must be exactly 0 or 1")
            v = u
        if v.size and v.max() > 1:
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", _locked(v))

    def voxel_count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class SoftMask:
    """Per-voxel foreground probabilities in [0, 1] (sigmoid output range)."""

    geometry: VolumeGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).reshape(self.geometry.dims)
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("soft mask values must lie in [0, 1]")
        object.__setattr__(self, "values", _locked(v))


GridKind = ScalarVolume | BinaryMask | SoftMask


def hu_window(volume: ScalarVolume) -> ScalarVolume:
    """Linearly map raw HU intensities from [-1000, 400] to [0, 1], clamping outside.

    Total on any input; -1000 HU (air) maps to 0, 400 HU to 1.
    """
    v = (volume.values - HU_LO) / (HU_HI - HU_LO)
    return ScalarVolume(volume.geometry, np.clip(v, 0.0, 1.0))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def extract_cube(scan: ScalarVolume, center_mm, side_mm: float) -> ScalarVolume:
    """Extract the axis-aligned cube of physical side ``side_mm`` centered at ``center_mm``.

    The cube is materialized on the scan's own grid (no interpolation): per
    axis it spans ``round(side_mm / spacing)`` voxels (half-up) positioned so
    the block is centered on ``center_mm``. Voxels outside the scan are
    padded with 0, which is air level after HU windowing.

    Raises ValueError when the cube does not intersect the scan at all.
    """
    if side_mm <= 0:
        raise ValueError("side_mm must be positive")
    geo = scan.geometry
    center_idx = geo.world_to_index(center_mm)
    dims_out = []
    starts = []
    for ax in range(3):
        n_out = _round_half_up(side_mm / geo.spacing_mm[ax])
        if n_out < 1:
            n_out = 1
        start = _round_half_up(center_idx[ax] - (n_out - 1) / 2.0)
        dims_out.append(n_out)
        starts.append(start)
        if start + n_out <= 0 or start >= geo.dims[ax]:
            raise ValueError("requested cube lies entirely outside the scan")

    out = np.zeros(dims_out, dtype=np.float32)
    src_lo = [max(0, s) for s in starts]
    src_hi = [min(geo.dims[ax], starts[ax] + dims_out[ax]) for ax in range(3)]
    dst_lo = [src_lo[ax] - starts[ax] for ax in range(3)]
    dst_hi = [dst_lo[ax] + (src_hi[ax] - src_lo[ax]) for ax in range(3)]
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = scan.values[
        src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]
    ]
    origin_out = tuple(
        geo.origin_mm[ax] + starts[ax] * geo.spacing_mm[ax] for ax in range(3)
    )
    return ScalarVolume(VolumeGeometry(tuple(dims_out), geo.spacing_mm, origin_out), out)


def sample_trilinear(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinearly interpolate ``values`` (nz, ny, nx) at continuous index points.

    ``pts`` has shape (..., 3) in (z, y, x) index coordinates; coordinates are
    clamped to the grid so edge voxels extend outward (no extrapolation).
    """
    pts = np.asarray(pts, dtype=np.float64)
    shape = values.shape
    out_shape = pts.shape[:-1]
    p = pts.reshape(-1, 3)
    acc = None
    lo = np.empty_like(p, dtype=np.int64)
    fr = np.empty_like(p)
    for ax in range(3):
        c = np.clip(p[:, ax], 0.0, shape[ax] - 1.0)
        f = np.floor(c)
        lo[:, ax] = f.astype(np.int64)
        fr[:, ax] = c - f
    hi = np.minimum(lo + 1, np.array(shape) - 1)
    for dz in (0, 1):
        wz = fr[:, 0] if dz else 1.0 - fr[:, 0]
        iz = hi[:, 0] if dz else lo[:, 0]
        for dy in (0, 1):
            wy = fr[:, 1] if dy else 1.0 - fr[:, 1]
            iy = hi[:, 1] if dy else lo[:, 1]
            for dx in (0, 1):
                wx = fr[:, 2] if dx else 1.0 - fr[:, 2]
                ix = hi[:, 2] if dx else lo[:, 2]
                term = values[iz, iy, ix] * (wz * wy * wx)
                acc = term if acc is None else acc + term
    return acc.reshape(out_shape)


def _resample_points(in_dims, out_dims) -> np.ndarray:
    """Continuous input-index positions of the output voxel centers (edge-aligned)."""
    axes = [
        (np.arange(m) + 0.5) * (n / m) - 0.5
        for n, m in zip(in_dims, out_dims)
    ]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    return np.stack([zz, yy, xx], axis=-1)


def resample_iso(volume: ScalarVolume, target_dims) -> ScalarVolume:
    """Trilinearly resample onto a ``target_dims`` grid covering the same physical box.

    Output spacing is ``extent / target_dims`` per axis; output values never
    leave the input value range.
    """
    target_dims = tuple(int(d) for d in target_dims)
    if any(d < 1 for d in target_dims):
        raise ValueError(f"target dims must be >= 1, got {target_dims}")
    geo = volume.geometry
    if any(d < 2 for d in geo.dims):
        raise ValueError("input dims must be >= 2 per axis for trilinear resampling")
    pts = _resample_points(geo.dims, target_dims)
    out = sample_trilinear(volume.values, pts).astype(np.float32)
    np.clip(out, volume.values.min(), volume.values.max(), out=out)
    spacing_out = tuple(e / m for e, m in zip(geo.extent_mm, target_dims))
    origin_out = tuple(
        o - s / 2.0 + so / 2.0
        for o, s, so in zip(geo.origin_mm, geo.spacing_mm, spacing_out)
    )
    return ScalarVolume(VolumeGeometry(target_dims, spacing_out, origin_out), out)


def resample_mask(mask: BinaryMask, target_dims, keep_nonempty: bool = False) -> BinaryMask:
    """Resample a binary mask by thresholding the trilinear indicator at 0.5.

    With ``keep_nonempty`` a nonempty source mask never resamples to an empty
    one: the output voxel nearest the source centroid is set instead. Sub-voxel
    nodules at coarse grids would otherwise vanish.
    """
    as_scalar = ScalarVolume(mask.geometry, mask.values.astype(np.float32))
    soft = resample_iso(as_scalar, target_dims)
    vals = (soft.values >= 0.5).astype(np.uint8)
    if keep_nonempty and mask.values.any() and not vals.any():
        centroid = np.array(np.nonzero(mask.values)).mean(axis=1)
        scale = [m / n for n, m in zip(mask.geometry.dims, target_dims)]
        idx = [
            int(np.clip(round((c + 0.5) * s - 0.5), 0, m - 1))
            for c, s, m in zip(centroid, scale, target_dims)
        ]
        vals = vals.copy()
        vals[tuple(idx)] = 1
    return BinaryMask(soft.geometry, vals)


def threshold(mask: SoftMask, t: float) -> BinaryMask:
    """Binarize at ``t``: voxels with probability >= t become foreground."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    return BinaryMask(mask.geometry, (mask.values >= t).astype(np.uint8))


# --- IWV1 on-disk format ----------------------------------------------------
#
# <name>.json sidecar + <name>.raw little-endian flat payload, z-outermost.
# scalar/soft volumes are float32, masks are uint8 {0,1}.

_KIND_OF_TYPE = {ScalarVolume: "scalar", BinaryMask: "mask", SoftMask: "soft"}
_DTYPE_OF_KIND = {"scalar": "f32", "mask": "u8", "soft": "f32"}
_NP_DTYPE = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def save_volume(volume: GridKind, path) -> Path:
    """Write a grid as an IWV1 pair ``<path>.json`` + ``<path>.raw``; returns the sidecar path."""
    kind = _KIND_OF_TYPE[type(volume)]
    dtype = _DTYPE_OF_KIND[kind]
    geo = volume.geometry
    header = {
        "format": "IWV1",
        "kind": kind,
        "dims": list(geo.dims),
        "spacing_mm": list(geo.spacing_mm),
        "origin_mm": list(geo.origin_mm),
        "dtype": dtype,
    }
    json_path, raw_path = _paths(path)
    payload = np.ascontiguousarray(volume.values, dtype=_NP_DTYPE[dtype])
    json_path.write_text(json.dumps(header))
    raw_path.write_bytes(payload.tobytes())
    return json_path


def decode_header(header: dict) -> tuple[str, VolumeGeometry, np.dtype]:
    """Validate an IWV1 header dict; returns (kind, geometry, numpy dtype)."""
    if not isinstance(header, dict) or header.get("format") != "IWV1":
        raise VolumeFormatError(f"unsupported format: {header.get('format') if isinstance(header, dict) else header!r}")
    kind = header.get("kind")
    if kind not in _DTYPE_OF_KIND:
        raise VolumeFormatError(f"unknown kind {kind!r}")
    dtype = header.get("dtype")
    if dtype != _DTYPE_OF_KIND[kind]:
        raise VolumeFormatError(f"kind {kind!r} requires dtype {_DTYPE_OF_KIND[kind]!r}, got {dtype!r}")
    try:
        geo = VolumeGeometry(tuple(header["dims"]), tuple(header["spacing_mm"]), tuple(header["origin_mm"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"invalid header geometry: {exc}") from exc
    return kind, geo, _NP_DTYPE[dtype]


def decode_payload(header: dict, raw: bytes) -> GridKind:
    """Build the grid object for an IWV1 header + raw payload byte string."""
    kind, geo, np_dtype = decode_header(header)
    n = geo.dims[0] * geo.dims[1] * geo.dims[2]
    expected = n * np_dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"payload length {len(raw)} does not match dims (expected {expected})")
    values = np.frombuffer(raw, dtype=np_dtype).reshape(geo.dims)
    if kind == "scalar":
        return ScalarVolume(geo, values)
    if kind == "soft":
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise VolumeFormatError("soft payload values outside [0, 1]")
        return SoftMask(geo, values)
    if values.size and values.max() > 1:
        raise VolumeFormatError("mask payload values outside {0, 1}")
    return BinaryMask(geo, values)


def load_volume(path) -> GridKind:
    """Read an IWV1 pair; exact inverse of :func:`save_volume`."""
    json_path, raw_path = _paths(path)
    try:
        header = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed header: {exc}") from exc
    return decode_payload(header, raw_path.read_bytes())
