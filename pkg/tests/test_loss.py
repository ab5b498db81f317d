import numpy as np
import pytest

from noduleseg.loss import LossConfig, attraction_loss, combined_loss, iou_loss


def fd_gradient(fn, x, step):
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = fn(x)
        flat[i] = orig - step
        lm = fn(x)
        flat[i] = orig
        gf[i] = (lp - lm) / (2 * step)
    return g


class TestIoULoss:
    def test_perfect_prediction(self):
        t = np.zeros((3, 3, 3))
        t[1, 1, 1] = 1
        loss, grad = iou_loss(t.copy(), t)
        assert loss == 0.0
        assert np.isfinite(grad).all()

    def test_empty_prediction_full_miss(self):
        t = np.zeros((3, 3, 3))
        t[0, 0, 0] = 1
        loss, _ = iou_loss(np.zeros_like(t), t)
        assert loss == 1.0

    def test_two_voxel_hand_value(self):
        # target (1,0), pred (.5,.5): inter .5, union 1.5, loss 1 - 1/3 = 2/3
        loss, _ = iou_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
        assert np.isclose(loss, 2.0 / 3.0)

    def test_both_empty_raises(self):
        with pytest.raises(ValueError, match="empty"):
            iou_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_symmetric_for_binary_prediction(self):
        rng = np.random.default_rng(0)
        a = (rng.random((4, 4, 4)) < 0.4).astype(float)
        b = (rng.random((4, 4, 4)) < 0.4).astype(float)
        assert np.isclose(iou_loss(a, b)[0], iou_loss(b, a)[0])

    def test_gradient_matches_finite_differences_64(self):
        rng = np.random.default_rng(1)
        t = (rng.random((6, 6, 6)) < 0.3).astype(np.float64)
        p = np.clip(rng.random((6, 6, 6)), 0.1, 0.9)
        _, grad = iou_loss(p, t)
        fd = fd_gradient(lambda x: iou_loss(x, t)[0], p, 1e-5)
        rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-12)
        assert rel.max() < 1e-6

    def test_gradient_matches_finite_differences_32(self):
        rng = np.random.default_rng(2)
        t = (rng.random((6, 6, 6)) < 0.3).astype(np.float32)
        p = np.clip(rng.random((6, 6, 6)), 0.1, 0.9).astype(np.float32)
        _, grad = iou_loss(p, t)
        fd = fd_gradient(lambda x: iou_loss(x, t)[0], p.astype(np.float64), 1e-3)
        rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-8)
        assert rel.max() < 1e-3


class TestAttractionLoss:
    def region_map(self):
        m = np.zeros((4, 4, 4))
        m[1, 1, :2] = 0.9
        m[1, 2, :2] = 0.8
        return m

    def test_full_coverage_is_zero_loss(self):
        m = self.region_map()
        loss, _ = attraction_loss(np.ones_like(m), m, gamma=0.5)
        assert loss == 0.0

    def test_gamma_one_empty_region_convention(self):
        m = self.region_map()
        loss, grad = attraction_loss(np.zeros_like(m), m, gamma=1.0)
        assert loss == 0.0
        assert not grad.any()

    def test_quarter_coverage_hand_value(self):
        m = self.region_map()  # region size 4 at gamma .5
        p = np.zeros_like(m)
        p[m > 0.5] = 0.25
        loss, grad = attraction_loss(p, m, gamma=0.5)
        assert np.isclose(loss, 0.75)
        assert np.allclose(grad[m > 0.5], -0.25)
        assert not grad[m <= 0.5].any()

    def test_strict_inequality_on_region(self):
        m = np.full((2, 2, 2), 0.5)
        loss, grad = attraction_loss(np.zeros_like(m), m, gamma=0.5)
        # M > gamma strictly: 0.5 is excluded, region empty
        assert loss == 0.0 and not grad.any()

    def test_monotone_in_region_constant_outside(self):
        rng = np.random.default_rng(3)
        m = rng.random((5, 5, 5))
        p = rng.random((5, 5, 5))
        _, grad = attraction_loss(p, m, gamma=0.6)
        assert (grad[m > 0.6] < 0).all()
        assert not grad[m <= 0.6].any()

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        m = rng.random((6, 6, 6))
        p = np.clip(rng.random((6, 6, 6)), 0.1, 0.9)
        _, grad = attraction_loss(p, m, gamma=0.4)
        fd = fd_gradient(lambda x: attraction_loss(x, m, 0.4)[0], p, 1e-5)
        rel = np.abs(grad - fd) / np.maximum(np.abs(grad) + np.abs(fd), 1e-12)
        assert rel.max() < 1e-6

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            attraction_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), gamma=1.5)


class TestCombinedLoss:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.t = (rng.random((6, 6, 6)) < 0.3).astype(np.float64)
        self.t[3, 3, 3] = 1.0
        self.p = np.clip(rng.random((6, 6, 6)), 0.1, 0.9)
        self.m = rng.random((6, 6, 6))

    def test_lambda_one_is_pure_iou(self):
        lv = combined_loss(self.p, self.t, self.m, LossConfig(lambda1=1.0, gamma=0.5))
        assert lv.total == lv.iou_term

    def test_lambda_zero_is_pure_attraction(self):
        lv = combined_loss(self.p, self.t, self.m, LossConfig(lambda1=0.0, gamma=0.5))
        assert lv.total == lv.attraction_term

    def test_reference_blend_arithmetic(self):
        # lambda1=.68 with terms (.5, .25) blends to .42 by hand
        assert np.isclose(0.68 * 0.5 + (1 - 0.68) * 0.25, 0.42)
        lv = combined_loss(self.p, self.t, self.m, LossConfig(lambda1=0.68, gamma=0.4))
        assert np.isclose(lv.total, 0.68 * lv.iou_term + 0.32 * lv.attraction_term)

    def test_terms_and_blend_in_unit_interval(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            t = (rng.random((5, 5, 5)) < 0.4).astype(float)
            t[2, 2, 2] = 1.0
            p = rng.random((5, 5, 5))
            m = rng.random((5, 5, 5))
            cfg = LossConfig(lambda1=float(rng.random()),
                             gamma=float(rng.random()),
                             decay_p=float(rng.random()))
            lv = combined_loss(p, t, m, cfg)
            assert 0.0 <= lv.iou_term <= 1.0
            assert 0.0 <= lv.attraction_term <= 1.0
            assert 0.0 <= lv.total <= 1.0
            assert np.isclose(lv.total,
                              cfg.lambda1 * lv.iou_term + (1 - cfg.lambda1) * lv.attraction_term,
                              atol=1e-6)

    def test_gradient_blend(self):
        cfg = LossConfig(lambda1=0.68, gamma=0.4)
        lv = combined_loss(self.p, self.t, self.m, cfg)
        _, g_iou = iou_loss(self.p, self.t)
        _, g_attr = attraction_loss(self.p, self.m, 0.4)
        assert np.allclose(lv.grad_wrt_pred, 0.68 * g_iou + 0.32 * g_attr)

    def test_zero_weight_map_only_iou_active(self):
        lv = combined_loss(self.p, self.t, np.zeros_like(self.m), LossConfig())
        assert lv.attraction_term == 0.0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda1=1.2)
    with pytest.raises(ValueError):
        LossConfig(gamma=-0.1)
