"""Deterministic synthetic nodule scenes standing in for real CT at desk scale.

Each case is a 51 mm cube sampled at 80^3 (0.6375 mm voxels) holding one
textured ellipsoidal nodule in noisy parenchyma, optionally attached to a
vessel-like tube or a wall-like half-space, plus 2-4 simulated expert masks
made by warping the true ellipsoid with smooth low-frequency radial fields.
Everything derives from the case seed, byte for byte.

Intensities live on the post-window [0, 1] scale and mimic CT contrast
ordering (air 0, parenchyma ~0.15, soft tissue high); the exact levels are
generator constants:

    solid core 0.85, sub-solid 0.60, non-solid 0.45, attachments 0.75.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .metrics import AnnotationSet, equivalent_radius, iou
from .volgrid import (
    BinaryMask,
    ScalarVolume,
    VolumeGeometry,
    load_volume,
    sample_trilinear,
    save_volume,
)

NATIVE_SIDE = 80
CUBE_MM = 51.0
NATIVE_GEOMETRY = VolumeGeometry(
    (NATIVE_SIDE,) * 3, (CUBE_MM / NATIVE_SIDE,) * 3, (0.0, 0.0, 0.0)
)

PARENCHYMA = 0.15
CORE_INTENSITY = {"solid": 0.85, "sub-solid": 0.60, "non-solid": 0.45}
SOFTNESS = {"solid": 0.04, "sub-solid": 0.10, "non-solid": 0.16}
ATTACHMENT_INTENSITY = 0.75
MAX_PERTURB = 0.15  # relative radial amplitude of annotator disagreement


@dataclass(frozen=True)
class NoduleSpec:
    center: tuple[float, float, float]          # voxel coords
    semi_axes: tuple[float, float, float]       # voxels, each >= 1.5
    rotation: tuple[float, float, float]        # intrinsic z-y-x Euler angles, radians
    texture: str                                # solid | sub-solid | non-solid
    core_intensity: float
    boundary_softness: float
    attachment: str = "none"                    # none | vessel | wall
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if min(self.semi_axes) < 1.5:
            raise ValueError(f"semi-axes must be >= 1.5 voxels, got {self.semi_axes}")
        if self.texture not in CORE_INTENSITY:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.attachment not in ("none", "vessel", "wall"):
            raise ValueError(f"unknown attachment {self.attachment!r}")
        if not 0.0 <= self.core_intensity <= 1.0:
            raise ValueError("core_intensity must lie in [0, 1]")


@dataclass(frozen=True)
class SynthCase:
    case_id: str
    volume: ScalarVolume
    annotations: AnnotationSet
    spec: NoduleSpec
    true_mask: BinaryMask

    def __post_init__(self):
        if not 2 <= len(self.annotations) <= 4:
            raise ValueError("a case carries 2-4 annotator masks")
        if self.annotations.geometry.dims != self.volume.geometry.dims:
            raise ValueError("annotations must share the volume grid")


_GRID_CACHE: dict[tuple, np.ndarray] = {}


def _grid_points(dims, span: float | None = None) -> np.ndarray:
    """(nz, ny, nx, 3) voxel-index points, cached per grid (read-only)."""
    key = (tuple(dims), span)
    if key not in _GRID_CACHE:
        if span is None:
            axes = [np.arange(d, dtype=np.float64) for d in dims]
        else:
            axes = [np.linspace(0.0, span, d) for d in dims]
        zz, yy, xx = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([zz, yy, xx], axis=-1)
        pts.setflags(write=False)
        _GRID_CACHE[key] = pts
    return _GRID_CACHE[key]


def _rotation_matrix(angles) -> np.ndarray:
    az, ay, ax = angles
    cz, sz = math.cos(az), math.sin(az)
    cy, sy = math.cos(ay), math.sin(ay)
    cx, sx = math.cos(ax), math.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])   # rotate about z: acts on (y,x)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _radial_coordinate(spec: NoduleSpec, dims) -> np.ndarray:
    """rho(v): 1 exactly on the ellipsoid surface, <1 inside."""
    pts = _grid_points(dims) - np.asarray(spec.center)
    local = pts @ _rotation_matrix(spec.rotation)
    scaled = local / np.asarray(spec.semi_axes)
    return np.sqrt((scaled * scaled).sum(axis=-1))


def _smooth_radial_field(rng: np.random.Generator, dims, amplitude: float) -> np.ndarray:
    """Low-frequency multiplicative size perturbation, |field| <= amplitude."""
    coarse = rng.uniform(-amplitude, amplitude, size=(4, 4, 4))
    return sample_trilinear(coarse, _grid_points(dims, span=3.0))


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=ndimage.generate_binary_structure(3, 1))
    if n <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def _annotator_mask(rho: np.ndarray, rng: np.random.Generator,
                    size_offset: float, field_amplitude: float, dims) -> np.ndarray:
    """Warp the true surface by a per-annotator size offset plus a smooth field.

    The constant term models annotators who systematically read the nodule
    larger or smaller (the dominant real-world disagreement); the smooth
    field adds local boundary disagreement. The total stays within the 15%
    relative ceiling.
    """
    field = size_offset + _smooth_radial_field(rng, dims, field_amplitude)
    np.clip(field, -MAX_PERTURB, MAX_PERTURB, out=field)
    mask = rho <= 1.0 + field
    return _largest_component(mask)


def _attachment_intensity(spec: NoduleSpec, dims, rng: np.random.Generator) -> np.ndarray:
    pts = _grid_points(dims) - np.asarray(spec.center)
    out = np.zeros(dims)
    if spec.attachment == "vessel":
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        along = pts @ direction
        radial = pts - along[..., None] * direction
        dist = np.sqrt((radial * radial).sum(axis=-1))
        radius_vox = rng.uniform(1.0, 1.9)
        out[dist <= radius_vox] = 1.0
    elif spec.attachment == "wall":
        normal = rng.standard_normal(3)
        normal /= np.linalg.norm(normal)
        offset = 1.1 * max(spec.semi_axes)
        out[(pts @ normal) >= offset] = 1.0
    return out


def generate_case(spec: NoduleSpec, geometry: VolumeGeometry = NATIVE_GEOMETRY,
                  case_id: str | None = None) -> SynthCase:
    """Rasterize one nodule scene plus its simulated expert annotations.

    The annotator masks are the true ellipsoid warped by smooth radial fields
    (relative amplitude at most 15%); if a draw violates the agreement
    invariants (each mask IoU >= 0.5 against the truth, pairwise >= 0.4) the
    amplitude is halved and redrawn, deterministically.
    """
    dims = geometry.dims
    margin = (1.0 + MAX_PERTURB) * max(spec.semi_axes) + 1.0
    for c, d in zip(spec.center, dims):
        if c - margin < 0 or c + margin > d - 1:
            raise ValueError("nodule (plus perturbation margin) must fit inside the volume")

    # independent substreams so e.g. toggling the attachment cannot reshuffle
    # the annotator draws
    r_attach, r_noise, r_ann = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)
    )
    rho = _radial_coordinate(spec, dims)
    profile = expit((1.0 - rho) / spec.boundary_softness)
    intensity = PARENCHYMA + (spec.core_intensity - PARENCHYMA) * profile
    if spec.attachment != "none":
        attach = _attachment_intensity(spec, dims, r_attach)
        intensity = np.maximum(intensity, ATTACHMENT_INTENSITY * attach)
    if spec.noise_sigma > 0:
        intensity = intensity + r_noise.normal(0.0, spec.noise_sigma, size=dims)
    volume = ScalarVolume(geometry, np.clip(intensity, 0.0, 1.0))

    true_mask = BinaryMask(geometry, (rho <= 1.0).astype(np.uint8))
    n_annotators = int(r_ann.integers(2, 5))
    offsets = r_ann.uniform(-0.12, 0.12, size=n_annotators)
    field_amp = r_ann.uniform(0.02, 0.06)
    for _ in range(4):
        masks = [
            BinaryMask(geometry, _annotator_mask(rho, r_ann, off, field_amp, dims).astype(np.uint8))
            for off in offsets
        ]
        ok = all(m.values.any() and iou(m, true_mask) >= 0.5 for m in masks)
        if ok:
            ok = all(
                iou(masks[i], masks[j]) >= 0.4
                for i in range(n_annotators) for j in range(i + 1, n_annotators)
            )
        if ok:
            break
        offsets *= 0.5
        field_amp *= 0.5
    else:
        masks = [true_mask] * n_annotators

    return SynthCase(
        case_id=case_id or f"case_{spec.seed:06d}",
        volume=volume,
        annotations=AnnotationSet(masks),
        spec=spec,
        true_mask=true_mask,
    )


def _stratified_textures(n: int, mix, rng: np.random.Generator) -> list[str]:
    """Largest-remainder allocation of texture classes, then a seeded shuffle."""
    names = ("non-solid", "sub-solid", "solid")
    probs = np.asarray(mix, dtype=float)
    probs = probs / probs.sum()
    counts = np.floor(probs * n).astype(int)
    rema = probs * n - counts
    for _ in range(n - counts.sum()):
        i = int(np.argmax(rema))
        counts[i] += 1
        rema[i] = -1
    out = [name for name, c in zip(names, counts) for _ in range(c)]
    rng.shuffle(out)
    return out


def _semi_axes_for_radius(radius_mm: float, spacing: float,
                          rng: np.random.Generator) -> tuple[float, float, float]:
    """Random anisotropy with the geometric mean pinned to the target radius."""
    r_vox = radius_mm / spacing
    u = rng.uniform(-0.2, 0.2, size=3)
    axes = r_vox * np.exp(u - u.mean())
    for _ in range(3):
        low = axes < 1.5
        if not low.any():
            break
        deficit = np.prod(axes[low]) / np.prod(np.full(low.sum(), 1.5))
        axes[low] = 1.5
        free = ~low
        if free.any():
            axes[free] *= deficit ** (1.0 / free.sum())
    return tuple(float(a) for a in np.maximum(axes, 1.5))


def generate_dataset(n_cases: int, size_range_mm=(1.0, 8.0),
                     texture_mix=(0.06, 0.14, 0.80), seed: int = 0,
                     noise_sigma: float = 0.03,
                     geometry: VolumeGeometry = NATIVE_GEOMETRY) -> list[SynthCase]:
    """Generate a reproducible case list covering the requested radius band.

    texture_mix is (non-solid, sub-solid, solid); classes are assigned by
    stratified counts, not sampling, so realized counts match expectation to
    rounding. Every case's measured equivalent radius (mean over annotators)
    lands inside size_range_mm; the generator resizes and retries when
    rasterization drifts a case outside the band.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    lo, hi = (float(v) for v in size_range_mm)
    if not 0 < lo < hi:
        raise ValueError(f"invalid radius range {size_range_mm}")
    master = np.random.default_rng(seed)
    textures = _stratified_textures(n_cases, texture_mix, master)
    child_seeds = np.random.SeedSequence(seed).spawn(n_cases)
    spacing = geometry.spacing_mm[0]
    center0 = (np.asarray(geometry.dims, dtype=float) - 1.0) / 2.0

    cases = []
    for i in range(n_cases):
        rng = np.random.default_rng(child_seeds[i])
        case_seed = int(rng.integers(0, 2 ** 31 - 1))
        texture = textures[i]
        margin = 0.08
        target_r = rng.uniform(lo * (1 + margin), hi * (1 - margin))
        jitter = rng.uniform(-2.0, 2.0, size=3)
        rotation = tuple(rng.uniform(0.0, math.pi, size=3))
        attachment = rng.choice(["none", "vessel", "wall"], p=[0.6, 0.25, 0.15])
        axes = _semi_axes_for_radius(target_r, spacing, rng)
        r = target_r
        for _ in range(3):
            spec = NoduleSpec(
                center=tuple(center0 + jitter),
                semi_axes=axes,
                rotation=rotation,
                texture=texture,
                core_intensity=CORE_INTENSITY[texture],
                boundary_softness=SOFTNESS[texture],
                attachment=str(attachment),
                noise_sigma=noise_sigma,
                seed=case_seed,
            )
            case = generate_case(spec, geometry, case_id=f"case_{i:04d}")
            measured = equivalent_radius(case.annotations)
            if lo <= measured <= hi:
                break
            # rasterization drifted the case out of band: linear size correction
            r = float(np.clip(r * (target_r / measured),
                              lo * (1 + margin), hi * (1 - margin)))
            axes = _semi_axes_for_radius(r, spacing, rng)
        cases.append(case)
    return cases


# --- dataset directory layout ---------------------------------------------------


def save_dataset(cases: list[SynthCase], root) -> Path:
    """case_<id>/volume.{json,raw} + ann_<k>.{json,raw} + spec.json per case."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in cases:
        d = root / case.case_id
        d.mkdir(exist_ok=True)
        save_volume(case.volume, d / "volume")
        save_volume(case.true_mask, d / "true_mask")
        for k, mask in enumerate(case.annotations.masks):
            save_volume(mask, d / f"ann_{k}")
        d.joinpath("spec.json").write_text(json.dumps(asdict(case.spec), indent=2))
    return root


def load_dataset(root) -> list[SynthCase]:
    root = Path(root)
    cases = []
    for d in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("case_")):
        spec = NoduleSpec(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in json.loads((d / "spec.json").read_text()).items()})
        volume = load_volume(d / "volume")
        true_mask = load_volume(d / "true_mask")
        masks = []
        for ann in sorted(d.glob("ann_*.json"), key=lambda p: int(re.findall(r"\d+", p.stem)[0])):
            masks.append(load_volume(ann))
        cases.append(SynthCase(
            case_id=d.name, volume=volume, annotations=AnnotationSet(masks),
            spec=spec, true_mask=true_mask,
        ))
    return cases
