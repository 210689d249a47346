"""Warping, warp-error maps, occlusion masks, metrics, resize, color wheel."""

import numpy as np
import pytest

import weatherflow.autodiff as ad
import weatherflow.flowops as fo
from weatherflow.autodiff import Tensor
from weatherflow.errors import DegenerateInputError, ShapeError

from fdcheck import check_grads
from test_spatial import interp_bilinear_scalar


def flow_const(u, v, h, w, b=1):
    arr = np.zeros((b, 2, h, w))
    arr[:, 0] = u
    arr[:, 1] = v
    return fo.FlowField(Tensor(arr))


class TestWarp:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(0)
        img = Tensor(rng.random((1, 1, 6, 6)))
        out = fo.warp(img, flow_const(0, 0, 6, 6))
        assert np.array_equal(out.data, img.data)

    def test_integer_shift_inverse(self):
        rng = np.random.default_rng(1)
        img1 = rng.random((1, 1, 8, 8))
        img2 = np.zeros_like(img1)
        img2[:, :, :, 2:] = img1[:, :, :, :-2]  # frame translated by (+2, 0)
        out = fo.warp(Tensor(img2), flow_const(2, 0, 8, 8))
        assert np.max(np.abs(out.data[:, :, :, :-2] - img1[:, :, :, :-2])) == 0.0

    def test_fractional_flow_hand_value(self):
        img = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2))
        out = fo.warp(img, flow_const(0.5, 0, 2, 2))
        assert out.data[0, 0, 0, 0] == 0.5  # between 0 and 1 on the top row

    def test_shape_mismatch(self):
        img = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ShapeError):
            fo.warp(img, flow_const(0, 0, 5, 5))

    def test_linear_in_image(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(1, 2, 6, 6))
        b = rng.normal(size=(1, 2, 6, 6))
        fl = flow_const(1.3, -0.7, 6, 6)
        lhs = fo.warp(Tensor(2.0 * a - 3.0 * b), fl).data
        rhs = 2.0 * fo.warp(Tensor(a), fl).data - 3.0 * fo.warp(Tensor(b), fl).data
        assert np.max(np.abs(lhs - rhs)) < 1e-13


class TestWarpError:
    def test_identity_zero_map(self):
        rng = np.random.default_rng(3)
        img = Tensor(rng.random((1, 1, 5, 5)))
        wm = fo.warp_error(img, img, flow_const(0, 0, 5, 5))
        assert np.array_equal(wm.tensor.data, np.zeros((1, 1, 5, 5)))

    def test_constant_images_any_flow(self):
        rng = np.random.default_rng(4)
        i1 = Tensor(np.full((1, 1, 6, 6), 0.8))
        i2 = Tensor(np.full((1, 1, 6, 6), 0.3))
        fl = fo.FlowField(Tensor(rng.uniform(-10, 10, (1, 2, 6, 6))))
        wm = fo.warp_error(i1, i2, fl)
        assert np.allclose(wm.tensor.data, 0.5)

    def test_matches_scalar_bilinear_oracle(self):
        rng = np.random.default_rng(5)
        i1 = rng.random((1, 1, 7, 7))
        i2 = rng.random((1, 1, 7, 7))
        fl = rng.uniform(-3, 3, (1, 2, 7, 7))
        wm = fo.warp_error(Tensor(i1), Tensor(i2), fo.FlowField(Tensor(fl))).tensor.data
        for y in range(7):
            for x in range(7):
                want = i1[0, 0, y, x] - interp_bilinear_scalar(i2[0, 0], x + fl[0, 0, y, x], y + fl[0, 1, y, x])
                assert abs(wm[0, 0, y, x] - want) < 1e-12

    def test_eq11_identity_exact(self):
        """(w_y - w_x) == D1 - warp(D2, F) to machine epsilon, any inputs."""
        rng = np.random.default_rng(6)
        for _ in range(20):
            x1, x2, d1, d2 = (rng.normal(size=(1, 1, 8, 8)) for _ in range(4))
            fl = fo.FlowField(Tensor(rng.uniform(-4, 4, (1, 2, 8, 8))))
            w_x = fo.warp_error(Tensor(x1), Tensor(x2), fl).tensor.data
            w_y = fo.warp_error(Tensor(x1 + d1), Tensor(x2 + d2), fl).tensor.data
            w_d = d1 - fo.warp(Tensor(d2), fl).data
            assert np.max(np.abs((w_y - w_x) - w_d)) < 1e-12


class TestOcclusionMasks:
    def test_consistent_translation_all_visible(self):
        of, ob = fo.occlusion_masks(flow_const(3, 1, 8, 8), flow_const(-3, -1, 8, 8))
        # interior is consistent; border clamping can trip only the frame edge
        assert np.all(of.tensor.data[:, :, 2:-2, 2:-2] == 0)
        assert np.all(ob.tensor.data[:, :, 2:-2, 2:-2] == 0)

    def test_inconsistent_uniform_all_occluded(self):
        of, ob = fo.occlusion_masks(flow_const(10, 0, 8, 8), flow_const(10, 0, 8, 8))
        # consistency error 400 >> a1*(100+100) + a2 = 2.5
        assert np.all(of.tensor.data == 1)
        assert np.all(ob.tensor.data == 1)

    def test_inconsistent_block_inside_consistent_field(self):
        h = w = 12
        fwd = np.zeros((1, 2, h, w))
        bwd = np.zeros((1, 2, h, w))
        bwd[0, 0, 4:8, 4:8] = 5.0  # block violates fb-consistency
        of, _ = fo.occlusion_masks(fo.FlowField(Tensor(fwd)), fo.FlowField(Tensor(bwd)))
        want = np.zeros((1, 1, h, w))
        want[0, 0, 4:8, 4:8] = 1.0
        assert np.array_equal(of.tensor.data, want)

    def test_masks_binary_and_idempotent(self):
        rng = np.random.default_rng(7)
        f = fo.FlowField(Tensor(rng.uniform(-5, 5, (1, 2, 10, 10))))
        b = fo.FlowField(Tensor(rng.uniform(-5, 5, (1, 2, 10, 10))))
        a1 = fo.occlusion_masks(f, b)
        a2 = fo.occlusion_masks(f, b)
        for m1, m2 in zip(a1, a2):
            assert np.array_equal(m1.tensor.data, m2.tensor.data)
            assert set(np.unique(m1.tensor.data)) <= {0.0, 1.0}

    def test_masks_detached(self):
        fwd = Tensor(np.zeros((1, 2, 6, 6)), requires_grad=True)
        of, ob = fo.occlusion_masks(fo.FlowField(fwd), flow_const(0, 0, 6, 6))
        assert not of.tensor.requires_grad and of.tensor.node is None


class TestMetrics:
    def test_epe_zero_on_equal(self):
        rng = np.random.default_rng(8)
        f = fo.FlowField(Tensor(rng.normal(size=(1, 2, 5, 5))))
        assert fo.epe(f, f) == 0.0

    def test_epe_345(self):
        assert fo.epe(flow_const(3, 4, 6, 6), flow_const(0, 0, 6, 6)) == 5.0

    def test_epe_mean_of_halves(self):
        pred = np.zeros((1, 2, 2, 4))
        pred[0, 0, :, :2] = 1.0
        pred[0, 0, :, 2:] = 3.0
        assert fo.epe(fo.FlowField(Tensor(pred)), flow_const(0, 0, 2, 4)) == 2.0

    def test_epe_empty_valid_raises(self):
        with pytest.raises(DegenerateInputError):
            fo.epe(flow_const(0, 0, 2, 2), flow_const(0, 0, 2, 2), valid=np.zeros((1, 2, 2)))

    def test_f1_zero_on_equal(self):
        rng = np.random.default_rng(9)
        f = fo.FlowField(Tensor(rng.normal(size=(1, 2, 5, 5))))
        assert fo.f1_all(f, f) == 0.0

    def test_f1_large_gt_small_relative_error(self):
        # 4 px error on 100 px gt: 4 > 3 but 4 < 5% of 100 -> not an outlier
        assert fo.f1_all(flow_const(104, 0, 4, 4), flow_const(100, 0, 4, 4)) == 0.0

    def test_f1_small_gt_outlier(self):
        # 4 px error on 10 px gt: 4 > 3 and 4 > 0.5 -> outlier
        assert fo.f1_all(flow_const(14, 0, 4, 4), flow_const(10, 0, 4, 4)) == 100.0

    def test_metric_oracle_random(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            p = rng.uniform(-20, 20, (1, 2, 6, 6))
            g = rng.uniform(-20, 20, (1, 2, 6, 6))
            v = rng.random((1, 6, 6)) > 0.3
            if not v.any():
                continue
            # independent scalar recomputation
            errs, outs = [], []
            for y in range(6):
                for x in range(6):
                    if not v[0, y, x]:
                        continue
                    du = p[0, 0, y, x] - g[0, 0, y, x]
                    dv = p[0, 1, y, x] - g[0, 1, y, x]
                    e = (du**2 + dv**2) ** 0.5
                    m = (g[0, 0, y, x] ** 2 + g[0, 1, y, x] ** 2) ** 0.5
                    errs.append(e)
                    outs.append(1.0 if (e > 3.0 and e > 0.05 * m) else 0.0)
            pf = fo.FlowField(Tensor(p))
            gf = fo.FlowField(Tensor(g))
            assert abs(fo.epe(pf, gf, v) - np.mean(errs)) < 1e-9
            assert abs(fo.f1_all(pf, gf, v) - 100.0 * np.mean(outs)) < 1e-9


class TestResizeAndColor:
    def test_resize_same_size_identity(self):
        rng = np.random.default_rng(11)
        f = fo.FlowField(Tensor(rng.normal(size=(1, 2, 6, 6))))
        out = fo.resize_flow(f, (6, 6))
        assert np.max(np.abs(out.tensor.data - f.tensor.data)) < 1e-12

    def test_upsample_doubles_constant_flow(self):
        out = fo.resize_flow(flow_const(3, 0, 4, 4), (8, 8))
        assert np.allclose(out.tensor.data[0, 0], 6.0)
        assert np.allclose(out.tensor.data[0, 1], 0.0)

    def test_zero_target_size_raises(self):
        with pytest.raises(ShapeError):
            fo.resize_flow(flow_const(1, 0, 4, 4), (0, 4))

    def test_zero_flow_renders_white(self):
        img = fo.flow_to_color(flow_const(0, 0, 5, 5))
        assert img.shape == (5, 5, 3)
        assert np.all(img == 255)

    def test_color_shape_and_range(self):
        rng = np.random.default_rng(12)
        img = fo.flow_to_color(fo.FlowField(Tensor(rng.normal(size=(1, 2, 8, 8)) * 4)))
        assert img.dtype == np.uint8 and img.shape == (8, 8, 3)

    def test_warp_gradient_wrt_flow(self):
        rng = np.random.default_rng(13)
        img = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True)
        base = rng.integers(1, 5, size=(1, 2, 8, 8)).astype(float) - 3.0
        fl = Tensor(base + rng.uniform(0.2, 0.8, (1, 2, 8, 8)), requires_grad=True)
        probe = Tensor(rng.normal(size=(1, 1, 8, 8)))
        check_grads(lambda: ad.reduce_sum(fo.warp(img, fo.FlowField(fl)) * probe), [img, fl])
