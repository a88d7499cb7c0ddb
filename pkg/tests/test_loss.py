import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgeagree.filters import FILTER_SET_NAMES
from edgeagree.grid import InvalidInputError
from edgeagree.loss import (BCE_EPS, LossConfig, combined_mask_loss, edge_agreement_loss,
                            lp_loss, mask_bce_loss, smooth_mask)

from oracles import (SOBEL_X, SOBEL_Y, bce_oracle, central_diff, lp_oracle, naive_conv2d,
                     rel_error, square_mask)

# Sum of squared Sobel responses of the centred 8x8 square over both channels,
# from the naive oracle; value = 928 / (784 * 2).
SQUARE_SOBEL_L2 = 928.0 / 1568.0

FORMULATIONS = ["standard", "productpw", "expproductpw"]


def random_pair(rng, size=8, binary_gt=True):
    pred = rng.uniform(0.05, 0.95, size=(size, size))
    if binary_gt:
        gt = (rng.uniform(size=(size, size)) < 0.5).astype(float)
    else:
        gt = rng.uniform(size=(size, size))
    return pred, gt


class TestLp:
    def test_identity(self):
        y = np.random.default_rng(0).normal(size=(2, 5, 5))
        value, grad = lp_loss(y, y, 3)
        assert value == 0.0
        assert np.all(grad == 0)

    def test_constant_closed_form(self):
        value, grad = lp_loss(np.ones((28, 28)), np.full((28, 28), 0.5), 2)
        assert value == pytest.approx(0.25, abs=1e-15)
        np.testing.assert_allclose(grad, 1.0 / 784, rtol=1e-14)
        assert grad[0, 0, 0] == pytest.approx(0.0012755, abs=1e-7)

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_matches_scalar_oracle(self, p):
        rng = np.random.default_rng(p)
        y, t = rng.normal(size=(2, 3, 6, 6))
        assert lp_loss(y, t, p)[0] == pytest.approx(lp_oracle(y, t, p), rel=1e-13)

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_gradient_finite_differences(self, p):
        rng = np.random.default_rng(10 + p)
        for _ in range(20):
            y, t = rng.normal(size=(2, 2, 5, 5))
            _, grad = lp_loss(y, t, p)
            fd = central_diff(lambda z: lp_loss(z, t, p)[0], y)
            mask = np.abs(y - t) > 1e-4 if p == 1 else np.ones_like(y, dtype=bool)
            assert rel_error(grad[mask], fd[mask]) < 1e-6

    def test_p1_subgradient_zero_at_tie(self):
        _, grad = lp_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 1)
        assert np.all(grad == 0)

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            lp_loss(np.zeros((1, 3, 3)), np.zeros((2, 3, 3)), 2)
        with pytest.raises(InvalidInputError):
            lp_loss(np.zeros((3, 3)), np.zeros((3, 3)), 0)


class TestEdgeAgreement:
    def test_square_against_oracle(self):
        gt = square_mask()
        cfg = LossConfig("Sobel", p=2, alpha=1.0)
        res = edge_agreement_loss(np.zeros((28, 28)), gt, cfg)
        rx, ry = naive_conv2d(gt, SOBEL_X), naive_conv2d(gt, SOBEL_Y)
        oracle = lp_oracle(np.zeros((2, 28, 28)), np.stack([rx, ry]), 2)
        assert res.value == pytest.approx(oracle, rel=1e-14)
        assert res.value == pytest.approx(SQUARE_SOBEL_L2, rel=1e-14)

    def test_alpha_scaling(self):
        gt = square_mask()
        pred = np.zeros((28, 28))
        one = edge_agreement_loss(pred, gt, LossConfig("Sobel", alpha=1.0))
        sixteen = edge_agreement_loss(pred, gt, LossConfig("Sobel", alpha=16.0))
        assert sixteen.value == 16 * one.value
        np.testing.assert_array_equal(sixteen.grad_wrt_pred, 16 * one.grad_wrt_pred)

    @pytest.mark.parametrize("name", FILTER_SET_NAMES)
    @pytest.mark.parametrize("smooth", [False, True])
    @pytest.mark.parametrize("mag", [False, True])
    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_identity_of_indiscernibles(self, name, smooth, mag, p):
        m = square_mask(14, 6)
        cfg = LossConfig(name, p=p, smooth_gt=smooth, smooth_pred=smooth, include_magnitude=mag)
        res = edge_agreement_loss(m, m, cfg)
        assert res.value == 0.0
        assert np.all(res.grad_wrt_pred == 0)

    def test_one_sided_smoothing_is_not_an_identity(self):
        # smoothing only the target compares a blurred edge map with a sharp one
        m = square_mask(14, 6)
        assert edge_agreement_loss(m, m, LossConfig("Sobel", smooth_gt=True)).value > 0

    @pytest.mark.parametrize("name", FILTER_SET_NAMES)
    @pytest.mark.parametrize("smooth", [False, True])
    @pytest.mark.parametrize("mag", [False, True])
    def test_gradient_finite_differences(self, name, smooth, mag):
        rng = np.random.default_rng(abs(hash((name, smooth, mag))) % 2 ** 32)
        for i in range(20):
            pred, gt = random_pair(rng)
            cfg = LossConfig(name, p=1 + i % 4, alpha=1.3, smooth_gt=smooth, smooth_pred=smooth,
                             include_magnitude=mag)
            if cfg.p == 1:
                continue
            res = edge_agreement_loss(pred, gt, cfg)
            fd = central_diff(lambda z: edge_agreement_loss(z, gt, cfg).value, pred)
            assert rel_error(res.grad_wrt_pred, fd) < 1e-5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from(FILTER_SET_NAMES), st.integers(1, 4))
    def test_value_symmetry(self, seed, name, p):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(size=(2, 10, 10))
        cfg = LossConfig(name, p=p)
        assert edge_agreement_loss(a, b, cfg).value == pytest.approx(
            edge_agreement_loss(b, a, cfg).value, rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 20.0))
    def test_alpha_linearity(self, seed, c):
        rng = np.random.default_rng(seed)
        pred, gt = random_pair(rng, 10)
        base = edge_agreement_loss(pred, gt, LossConfig("Prewitt", alpha=1.0))
        scaled = edge_agreement_loss(pred, gt, LossConfig("Prewitt", alpha=c))
        assert scaled.value == c * base.value
        np.testing.assert_array_equal(scaled.grad_wrt_pred, c * base.grad_wrt_pred)

    def test_constant_offset_invariance_in_interior(self):
        from edgeagree.filters import get_filter_set
        from edgeagree.grid import conv2d
        rng = np.random.default_rng(2)
        a, b = rng.uniform(0, 0.5, size=(2, 12, 12))
        for name in FILTER_SET_NAMES:
            for k in get_filter_set(name).kernels:
                before = conv2d(a, k)[1:-1, 1:-1] - conv2d(b, k)[1:-1, 1:-1]
                after = conv2d(a + 0.3, k)[1:-1, 1:-1] - conv2d(b + 0.3, k)[1:-1, 1:-1]
                np.testing.assert_allclose(after, before, atol=1e-12)

    def test_steeper_p_is_larger_when_diffs_exceed_one(self):
        # Sobel response of a 0/1 step is at least 1 in magnitude on every
        # boundary pixel; using pred = 1 - gt makes every nonzero diff >= 2.
        gt = square_mask(16, 6)
        pred = 1.0 - gt
        vals = [edge_agreement_loss(pred, gt, LossConfig("Sobel", p=p)).value for p in (2, 3, 4)]
        diffs = np.abs(np.stack([naive_conv2d(pred - gt, k) for k in (SOBEL_X, SOBEL_Y)]))
        assert np.all((diffs == 0) | (diffs > 1))
        assert vals[2] >= vals[1] >= vals[0] > 0

    def test_no_gradient_into_gt(self):
        rng = np.random.default_rng(0)
        pred, gt = random_pair(rng)
        res = edge_agreement_loss(pred, gt, LossConfig("Sobel"))
        assert res.grad_wrt_pred.shape == pred.shape

    def test_rejects_bad_inputs(self):
        with pytest.raises(InvalidInputError):
            edge_agreement_loss(np.full((8, 8), 1.2), np.zeros((8, 8)), LossConfig())
        with pytest.raises(InvalidInputError):
            edge_agreement_loss(np.zeros((8, 8)), np.zeros((9, 9)), LossConfig())
        with pytest.raises(InvalidInputError):
            edge_agreement_loss(np.zeros((8, 8)), np.zeros((8, 8)), LossConfig(filter_set=None))


class TestBce:
    def test_half_is_log2(self):
        gt = square_mask()
        assert mask_bce_loss(np.full((28, 28), 0.5), gt).value == pytest.approx(np.log(2), rel=1e-14)

    def test_against_oracle(self):
        gt = square_mask()
        assert mask_bce_loss(np.full((28, 28), 0.3), gt).value == pytest.approx(
            bce_oracle(np.full((28, 28), 0.3), gt), rel=1e-13)

    def test_perfect_prediction_near_zero(self):
        gt = square_mask()
        res = mask_bce_loss(np.clip(gt, BCE_EPS, 1 - BCE_EPS), gt)
        assert 0 <= res.value <= 2e-7 * abs(np.log(BCE_EPS))

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pred, gt = random_pair(rng)
            res = mask_bce_loss(pred, gt)
            fd = central_diff(lambda z: mask_bce_loss(z, gt).value, pred)
            assert rel_error(res.grad_wrt_pred, fd) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            mask_bce_loss(np.zeros((3, 3)), np.zeros((3, 4)))


class TestCombined:
    def test_alpha_zero_reduces_to_bce(self):
        rng = np.random.default_rng(1)
        pred, gt = random_pair(rng, 12)
        bce = mask_bce_loss(pred, gt)
        for form in FORMULATIONS:
            res = combined_mask_loss(pred, gt, LossConfig("Sobel", alpha=0.0, formulation=form))
            assert res.value == bce.value
            np.testing.assert_array_equal(res.grad_wrt_pred, bce.grad_wrt_pred)

    def test_identical_masks(self):
        gt = square_mask()
        pred = np.clip(gt, BCE_EPS, 1 - BCE_EPS)
        res = combined_mask_loss(pred, gt, LossConfig("Sobel"))
        assert res.terms["edge"] < 1e-10
        exact = combined_mask_loss(gt, gt, LossConfig("Sobel"))
        assert exact.terms["edge"] == 0.0
        assert exact.value == mask_bce_loss(gt, gt).value

    def test_square_is_sum_of_oracles(self):
        gt = square_mask()
        pred = np.full((28, 28), 0.3)
        rx, ry = naive_conv2d(pred, SOBEL_X), naive_conv2d(pred, SOBEL_Y)
        gx, gy = naive_conv2d(gt, SOBEL_X), naive_conv2d(gt, SOBEL_Y)
        edge = lp_oracle(np.stack([rx, ry]), np.stack([gx, gy]), 2)
        res = combined_mask_loss(pred, gt, LossConfig("Sobel", p=2, alpha=1.0))
        assert abs(res.value - (bce_oracle(pred, gt) + edge)) < 1e-12

    def test_pixelwise_product_against_loops(self):
        rng = np.random.default_rng(8)
        pred, gt = random_pair(rng, 7)
        resp_p = [naive_conv2d(pred, k) for k in (SOBEL_X, SOBEL_Y)]
        resp_g = [naive_conv2d(gt, k) for k in (SOBEL_X, SOBEL_Y)]
        prod = expo = 0.0
        for i in range(7):
            for j in range(7):
                e = sum(abs(a[i, j] - b[i, j]) ** 3 for a, b in zip(resp_p, resp_g)) / 2
                bce = bce_oracle(pred[i:i + 1, j:j + 1], gt[i:i + 1, j:j + 1])
                prod += bce * e
                expo += bce * np.exp(e / 4)
        prod, expo = prod / 49, expo / 49
        r1 = combined_mask_loss(pred, gt, LossConfig("Sobel", p=3, alpha=0.5, formulation="productpw"))
        r2 = combined_mask_loss(pred, gt, LossConfig("Sobel", p=3, alpha=0.5, formulation="expproductpw"))
        assert r1.terms["edge"] == pytest.approx(prod, rel=1e-12)
        assert r2.terms["edge"] == pytest.approx(expo, rel=1e-12)
        assert r1.value == pytest.approx(r1.terms["mask"] + 0.5 * prod, rel=1e-13)

    @pytest.mark.parametrize("form", FORMULATIONS)
    def test_gradient_finite_differences(self, form):
        rng = np.random.default_rng(FORMULATIONS.index(form))
        names = FILTER_SET_NAMES
        for i in range(20):
            pred, gt = random_pair(rng)
            name = names[i % len(names)]
            p = 2 + i % 3
            if form == "expproductpw":
                # exp(|diff|^p / 4) overflows for the +-6 Kayyali kernels beyond p = 2
                p = 2 if name == "Kayyali" else 2 + i % 2
            cfg = LossConfig(name, p=p, alpha=float(rng.uniform(0.1, 2)),
                             smooth_gt=bool(i % 2), smooth_pred=bool(i % 3 == 0),
                             include_magnitude=bool(i % 4 == 1), formulation=form)
            res = combined_mask_loss(pred, gt, cfg)
            fd = central_diff(lambda z: combined_mask_loss(z, gt, cfg).value, pred)
            assert rel_error(res.grad_wrt_pred, fd) < 1e-5, cfg

    def test_exp_overflow_is_reported(self):
        pred = np.full((8, 8), 0.02)
        gt = square_mask(8, 4)
        with pytest.raises(InvalidInputError, match="overflow"):
            combined_mask_loss(1 - gt * 0.98, gt, LossConfig("Kayyali", p=4, formulation="expproductpw"))
        assert np.isfinite(combined_mask_loss(pred, gt, LossConfig("Sobel", formulation="expproductpw")).value)

    def test_baseline_config(self):
        rng = np.random.default_rng(0)
        pred, gt = random_pair(rng)
        res = combined_mask_loss(pred, gt, LossConfig(filter_set=None, alpha=0.0))
        assert res.value == mask_bce_loss(pred, gt).value
        assert res.terms == {"mask": res.value, "edge": 0.0}


class TestSmoothing:
    def test_zeros(self):
        assert np.all(smooth_mask(np.zeros((6, 6))) == 0)

    def test_constant_one(self):
        out = smooth_mask(np.ones((10, 10)))
        np.testing.assert_array_equal(out[1:-1, 1:-1], 1.0)
        assert out[0, 0] == 9 / 16
        assert out[0, 5] == 12 / 16
        np.testing.assert_allclose(out, naive_conv2d(np.ones((10, 10)), np.array(
            [[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 16), atol=1e-15)

    def test_impulse_response(self):
        m = np.zeros((7, 7))
        m[3, 3] = 1.0
        out = smooth_mask(m)
        np.testing.assert_array_equal(out[2:5, 2:5] * 16, [[1, 2, 1], [2, 4, 2], [1, 2, 1]])
        assert out.sum() == 1.0

    def test_range(self):
        m = (np.random.default_rng(0).uniform(size=(9, 9)) > 0.5).astype(float)
        out = smooth_mask(m)
        assert out.min() >= 0 and out.max() <= 1


class TestConfig:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            LossConfig(p=0)
        with pytest.raises(InvalidInputError):
            LossConfig(alpha=-1)
        with pytest.raises(InvalidInputError):
            LossConfig(filter_set="canny")
        with pytest.raises(InvalidInputError):
            LossConfig(formulation="squared")

    def test_edge_active(self):
        assert LossConfig().edge_active
        assert not LossConfig(alpha=0).edge_active
        assert not LossConfig(filter_set="none").edge_active
