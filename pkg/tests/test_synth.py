import numpy as np
import pytest
from scipy import ndimage

from noduleseg.metrics import AnnotationSet, equivalent_radius, interobserver_iou, iou
from noduleseg.synth import (
    NATIVE_GEOMETRY,
    NoduleSpec,
    SynthCase,
    generate_case,
    generate_dataset,
    load_dataset,
    save_dataset,
)


def solid_spec(seed=0, **over):
    kw = dict(
        center=(40.0, 40.0, 40.0),
        semi_axes=(7.0, 6.0, 5.0),
        rotation=(0.3, 0.1, 0.5),
        texture="solid",
        core_intensity=0.85,
        boundary_softness=0.04,
        attachment="none",
        noise_sigma=0.03,
        seed=seed,
    )
    kw.update(over)
    return NoduleSpec(**kw)


class TestGenerateCase:
    def test_noiseless_solid_thresholds_to_the_ellipsoid(self):
        case = generate_case(solid_spec(noise_sigma=0.0))
        recovered = case.volume.values >= 0.5
        truth = case.true_mask.values.astype(bool)
        inter = np.logical_and(recovered, truth).sum()
        union = np.logical_or(recovered, truth).sum()
        assert inter / union >= 0.95

    def test_fixed_seed_bit_identical(self):
        a = generate_case(solid_spec(seed=5))
        b = generate_case(solid_spec(seed=5))
        assert a.volume.values.tobytes() == b.volume.values.tobytes()
        assert len(a.annotations) == len(b.annotations)
        for ma, mb in zip(a.annotations.masks, b.annotations.masks):
            assert ma.values.tobytes() == mb.values.tobytes()

    def test_annotation_agreement_invariants(self):
        for seed in range(6):
            case = generate_case(solid_spec(seed=seed))
            assert 2 <= len(case.annotations) <= 4
            for m in case.annotations.masks:
                assert m.values.any()
                assert iou(m, case.true_mask) >= 0.5
            masks = case.annotations.masks
            for i in range(len(masks)):
                for j in range(i + 1, len(masks)):
                    assert iou(masks[i], masks[j]) >= 0.4
            assert 0.4 <= interobserver_iou(case.annotations) <= 1.0

    def test_annotations_single_connected_component(self):
        structure = ndimage.generate_binary_structure(3, 1)
        for seed in (1, 2, 3):
            case = generate_case(solid_spec(seed=seed))
            for m in case.annotations.masks:
                _, n = ndimage.label(m.values, structure=structure)
                assert n == 1

    def test_nodule_must_fit_inside(self):
        with pytest.raises(ValueError, match="inside"):
            generate_case(solid_spec(center=(4.0, 40.0, 40.0)))

    def test_attachments_change_the_image_not_the_masks(self):
        plain = generate_case(solid_spec(seed=9, attachment="none"))
        vessel = generate_case(solid_spec(seed=9, attachment="vessel"))
        assert not np.array_equal(plain.volume.values, vessel.volume.values)
        for a, b in zip(plain.annotations.masks, vessel.annotations.masks):
            assert np.array_equal(a.values, b.values)

    def test_semi_axes_floor_enforced(self):
        with pytest.raises(ValueError):
            solid_spec(semi_axes=(1.0, 5.0, 5.0))


class TestTextureContrast:
    def test_interior_intensity_ordering(self):
        means = {}
        for texture in ("solid", "sub-solid", "non-solid"):
            vals = []
            for seed in (0, 1, 2):
                case = generate_case(solid_spec(
                    seed=seed, texture=texture,
                    core_intensity={"solid": 0.85, "sub-solid": 0.60, "non-solid": 0.45}[texture],
                    boundary_softness={"solid": 0.04, "sub-solid": 0.10, "non-solid": 0.16}[texture],
                    noise_sigma=0.05,
                ))
                inside = case.true_mask.values > 0
                vals.append(case.volume.values[inside].mean())
            means[texture] = vals
        for s, ss, ns in zip(means["solid"], means["sub-solid"], means["non-solid"]):
            assert s > ss > ns


class TestGenerateDataset:
    def test_deterministic_under_seed(self):
        a = generate_dataset(6, seed=3)
        b = generate_dataset(6, seed=3)
        for ca, cb in zip(a, b):
            assert ca.volume.values.tobytes() == cb.volume.values.tobytes()
            for ma, mb in zip(ca.annotations.masks, cb.annotations.masks):
                assert ma.values.tobytes() == mb.values.tobytes()

    def test_stratified_texture_counts(self):
        mix = (0.06, 0.14, 0.80)
        cases = generate_dataset(50, texture_mix=mix, seed=1)
        counts = {t: sum(1 for c in cases if c.spec.texture == t)
                  for t in ("non-solid", "sub-solid", "solid")}
        for t, frac in zip(("non-solid", "sub-solid", "solid"), mix):
            assert abs(counts[t] - frac * 50) <= 2

    def test_equivalent_radii_within_requested_range(self):
        lo, hi = 1.0, 8.0
        cases = generate_dataset(30, (lo, hi), seed=2)
        for case in cases:
            r = equivalent_radius(case.annotations)
            assert lo <= r <= hi

    def test_radius_band_is_covered(self):
        cases = generate_dataset(40, (1.0, 8.0), seed=4)
        radii = [equivalent_radius(c.annotations) for c in cases]
        assert min(radii) < 4.0  # the referral band is populated
        assert max(radii) > 5.0

    def test_bad_args(self):
        with pytest.raises(ValueError):
            generate_dataset(0)
        with pytest.raises(ValueError):
            generate_dataset(3, size_range_mm=(5.0, 2.0))


class TestDatasetLayout:
    def test_save_load_round_trip(self, tmp_path):
        cases = generate_dataset(3, seed=6)
        root = save_dataset(cases, tmp_path / "data")
        names = sorted(p.name for p in (root / "case_0000").iterdir())
        assert "volume.json" in names and "volume.raw" in names
        assert "spec.json" in names
        assert any(n.startswith("ann_0") for n in names)
        back = load_dataset(root)
        assert len(back) == 3
        for orig, loaded in zip(cases, back):
            assert loaded.case_id == orig.case_id
            assert loaded.spec == orig.spec
            assert loaded.volume.values.tobytes() == orig.volume.values.tobytes()
            assert len(loaded.annotations) == len(orig.annotations)
            for a, b in zip(orig.annotations.masks, loaded.annotations.masks):
                assert a.values.tobytes() == b.values.tobytes()


def test_synth_case_validates_annotator_count():
    case = generate_case(solid_spec(seed=13))
    with pytest.raises(ValueError):
        SynthCase(case.case_id, case.volume,
                  AnnotationSet([case.annotations.masks[0]]),
                  case.spec, case.true_mask)


def test_native_geometry_covers_51mm():
    assert np.allclose(NATIVE_GEOMETRY.extent_mm, (51.0, 51.0, 51.0))
