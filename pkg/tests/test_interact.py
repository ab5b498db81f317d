import itertools
import math

import numpy as np
import pytest

from noduleseg.interact import (
    DegenerateStrokeError,
    InteractionSource,
    simulate_endpoints,
    validate_user_points,
)
from noduleseg.field import PointPair
from noduleseg.volgrid import BinaryMask, VolumeGeometry


def mask(values):
    values = np.asarray(values, dtype=np.uint8)
    return BinaryMask(VolumeGeometry(values.shape), values)


def ball(n=16, radius=5.0, center=None):
    center = center or ((n - 1) / 2,) * 3
    zz, yy, xx = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    v = ((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
         <= radius ** 2)
    return mask(v)


def boundary_pairs_oracle(values, z):
    """Exhaustive search over 4-connected boundary pixels of one slice."""
    sl = values[z].astype(bool)
    pts = []
    for y in range(sl.shape[0]):
        for x in range(sl.shape[1]):
            if not sl[y, x]:
                continue
            nb = []
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < sl.shape[0] and 0 <= nx < sl.shape[1]:
                    nb.append(sl[ny, nx])
                else:
                    nb.append(False)
            if not all(nb):
                pts.append((y, x))
    best = None
    for a, b in itertools.combinations(pts, 2):
        d = math.dist(a, b)
        if best is None or d > best[0] + 1e-12:
            best = (d, a, b)
    return best


class TestSimulateEndpoints:
    def test_ball_endpoints_on_equator(self):
        m = ball(radius=5.0)
        pair = simulate_endpoints(m)
        # centroid slice of a centered ball is its equator
        assert pair.p0[0] == pair.p1[0] == 8.0 or pair.p0[0] == pair.p1[0] == 7.0
        d = math.dist(pair.p0[1:], pair.p1[1:])
        assert 9.0 <= d <= 10.0

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for _ in range(15):
            v = np.zeros((8, 8, 8), dtype=np.uint8)
            blob = (rng.random((4, 5, 6)) < 0.5).astype(np.uint8)
            v[2:6, 1:6, 1:7] = blob
            if not v.any():
                continue
            coords = np.argwhere(v)
            z = int(math.floor(coords[:, 0].mean() + 0.5))
            oracle = boundary_pairs_oracle(v, z)
            if oracle is None:
                with pytest.raises(DegenerateStrokeError):
                    simulate_endpoints(mask(v))
                continue
            pair = simulate_endpoints(mask(v))
            got = math.dist(pair.p0[1:], pair.p1[1:])
            assert np.isclose(got, oracle[0])

    def test_deterministic(self):
        m = ball(radius=4.3)
        a = simulate_endpoints(m)
        b = simulate_endpoints(m)
        assert a == b

    def test_points_lie_on_slice_boundary(self):
        m = ball(radius=5.0)
        pair = simulate_endpoints(m)
        z = int(pair.p0[0])
        sl = m.values[z]
        for p in (pair.p0, pair.p1):
            y, x = int(p[1]), int(p[2])
            assert sl[y, x] == 1
            neighbors = [
                sl[y + dy, x + dx] if 0 <= y + dy < sl.shape[0] and 0 <= x + dx < sl.shape[1] else 0
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1))
            ]
            assert not all(neighbors)

    def test_empty_mask_raises(self):
        with pytest.raises(ValueError):
            simulate_endpoints(mask(np.zeros((4, 4, 4))))

    def test_single_voxel_degenerate(self):
        v = np.zeros((5, 5, 5))
        v[2, 2, 2] = 1
        with pytest.raises(DegenerateStrokeError):
            simulate_endpoints(mask(v))

    def test_tie_break_is_lexicographic(self):
        # a 2x2 plate: all four pixels are boundary, both diagonals tie;
        # the (y, x)-lexicographic rule picks (1,1)-(2,2)
        v = np.zeros((3, 4, 4), dtype=np.uint8)
        v[1, 1:3, 1:3] = 1
        pair = simulate_endpoints(mask(v))
        assert pair.p0 == (1.0, 1.0, 1.0)
        assert pair.p1 == (1.0, 2.0, 2.0)


class TestValidateUserPoints:
    GEO = VolumeGeometry((8, 8, 8))

    def test_in_bounds_unchanged(self):
        pair = validate_user_points((1.0, 2.0, 3.0), (4.0, 5.0, 6.0), self.GEO)
        assert pair.p0 == (1.0, 2.0, 3.0)
        assert pair.p1 == (4.0, 5.0, 6.0)

    def test_clamped_to_bounds(self):
        pair = validate_user_points((-1.0, 5.0, 5.0), (9.5, 2.0, 2.0), self.GEO)
        assert pair.p0 == (0.0, 5.0, 5.0)
        assert pair.p1 == (7.0, 2.0, 2.0)

    def test_coincident_rejected(self):
        with pytest.raises(ValueError, match="coincide"):
            validate_user_points((1.0, 1.0, 1.0), (1.0, 1.0, 1.0), self.GEO)

    def test_coincident_after_clamping_rejected(self):
        with pytest.raises(ValueError, match="coincide"):
            validate_user_points((-5.0, 0.0, 0.0), (-9.0, 0.0, 0.0), self.GEO)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            validate_user_points((float("inf"), 0.0, 0.0), (1.0, 1.0, 1.0), self.GEO)


def test_interaction_source_tags():
    pair = PointPair((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    assert InteractionSource("simulated", pair).tag == "simulated"
    with pytest.raises(ValueError):
        InteractionSource("guess", pair)
