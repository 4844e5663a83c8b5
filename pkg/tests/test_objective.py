import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusiondepth.autograd import ShapeError, Tensor
from fusiondepth.decoder import DepthMap
from fusiondepth.gradcheck import gradcheck
from fusiondepth.objective import (
    CSV_HEADER,
    LossConfig,
    MetricsReport,
    composite_loss,
    depth_metrics,
    metric_errors,
    mse,
    read_report,
    ssim,
    write_report,
)


def ssim_oracle(p, t, c1=1e-4, c2=9e-4):
    p, t = np.ravel(p), np.ravel(t)
    n = p.size
    mp, mt = p.sum() / n, t.sum() / n
    vp = ((p - mp) ** 2).sum() / (n - 1)
    vt = ((t - mt) ** 2).sum() / (n - 1)
    cov = ((p - mp) * (t - mt)).sum() / (n - 1)
    return (2 * mp * mt + c1) * (2 * cov + c2) / ((mp ** 2 + mt ** 2 + c1) * (vp + vt + c2))


class TestMse:
    def test_identity(self, rng):
        x = rng.uniform(size=(1, 4, 4))
        assert mse(x, x).item() == 0.0

    def test_unit_offset(self):
        assert mse(np.zeros((1, 3, 3)), np.ones((1, 3, 3))).item() == 1.0

    def test_two_pixels(self):
        assert mse(np.array([1.0, 3.0]), np.array([2.0, 1.0])).item() == 2.5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse(np.zeros(3), np.zeros(4))


class TestSsim:
    def test_identity(self, rng):
        x = rng.uniform(size=(1, 8, 8))
        assert abs(ssim(x, x).item() - 1.0) < 1e-12

    def test_constant_images(self):
        cfg = LossConfig()
        expect = (2 * 0.16 + cfg.c1) / (0.04 + 0.64 + cfg.c1)
        got = ssim(np.full((1, 4, 4), 0.2), np.full((1, 4, 4), 0.8)).item()
        assert abs(got - expect) < 1e-15

    def test_anticorrelated_is_negative(self, rng):
        t = rng.normal(size=(1, 6, 6))
        t -= t.mean()
        assert ssim(-t, t).item() < 0

    def test_matches_oracle(self, rng):
        p, t = rng.uniform(size=(1, 5, 7)), rng.uniform(size=(1, 5, 7))
        assert abs(ssim(p, t).item() - ssim_oracle(p, t)) < 1e-14

    def test_batch_is_mean_of_images(self, rng):
        p, t = rng.uniform(size=(3, 1, 4, 4)), rng.uniform(size=(3, 1, 4, 4))
        expect = np.mean([ssim_oracle(p[i], t[i]) for i in range(3)])
        assert abs(ssim(p, t).item() - expect) < 1e-14

    def test_dynamic_range_constants(self):
        cfg = LossConfig(dynamic_range=2.0)
        assert cfg.c1 == pytest.approx(4e-4) and cfg.c2 == pytest.approx(36e-4)

    def test_needs_two_pixels(self):
        with pytest.raises(ShapeError):
            ssim(np.ones((1, 1, 1)), np.ones((1, 1, 1)))

    def test_windowed_identity(self, rng):
        x = rng.uniform(size=(1, 12, 12))
        assert abs(ssim(x, x, LossConfig(window=7)).item() - 1.0) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 6), w=st.integers(2, 6),
           scale=st.sampled_from([1e-3, 1.0, 1e3]), shift=st.floats(-5, 5))
    def test_bounded_and_symmetric(self, seed, h, w, scale, shift):
        r = np.random.default_rng(seed)
        a = r.normal(scale=scale, size=(h, w)) + shift
        b = r.normal(scale=scale, size=(h, w)) + shift
        s_ab = ssim(a, b).item()
        assert abs(s_ab) <= 1.0 + 1e-12
        assert abs(s_ab - ssim(b, a).item()) < 1e-12


class TestCompositeLoss:
    def test_alpha_zero_is_mse(self, rng):
        p, t = rng.uniform(size=(2, 1, 4, 4)), rng.uniform(size=(2, 1, 4, 4))
        assert composite_loss(p, t, LossConfig(alpha=0.0)).item() == mse(p, t).item()

    def test_alpha_one_is_one_minus_ssim(self, rng):
        p, t = rng.uniform(size=(2, 1, 4, 4)), rng.uniform(size=(2, 1, 4, 4))
        assert composite_loss(p, t, LossConfig(alpha=1.0)).item() == 1.0 - ssim(p, t).item()

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.8, 1.0])
    def test_zero_at_identity(self, rng, alpha):
        x = rng.uniform(size=(1, 1, 6, 6))
        assert abs(composite_loss(x, x, LossConfig(alpha=alpha)).item()) < 1e-12

    def test_affine_in_alpha(self, rng):
        p, t = rng.uniform(size=(1, 8, 8)), rng.uniform(size=(1, 8, 8))
        m, s = mse(p, t).item(), ssim(p, t).item()
        for a in (0.1, 0.45, 0.9):
            assert abs(composite_loss(p, t, LossConfig(alpha=a)).item() - (m + a * (1 - s - m))) < 1e-12

    def test_nonnegative(self, rng):
        for _ in range(50):
            p, t = rng.uniform(size=(1, 4, 4)), rng.uniform(size=(1, 4, 4))
            assert composite_loss(p, t, LossConfig(alpha=rng.uniform())).item() >= 0

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_validation(self, alpha):
        with pytest.raises(ValueError):
            LossConfig(alpha=alpha)

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.8, 1.0])
    def test_gradient(self, rng, alpha):
        p = Tensor(rng.uniform(size=(2, 1, 4, 4)), requires_grad=True)
        t = rng.uniform(size=(2, 1, 4, 4))
        cfg = LossConfig(alpha=alpha)
        errs = gradcheck(lambda: composite_loss(p, t, cfg), [p])
        assert max(errs.values()) < 1e-6

    def test_windowed_gradient(self, rng):
        p = Tensor(rng.uniform(size=(1, 1, 8, 8)), requires_grad=True)
        t = rng.uniform(size=(1, 1, 8, 8))
        cfg = LossConfig(alpha=0.8, window=3)
        assert max(gradcheck(lambda: composite_loss(p, t, cfg), [p]).values()) < 1e-6


class TestMetrics:
    def test_identity(self, rng):
        d = rng.uniform(0.1, 1, size=(1, 4, 4))
        r = depth_metrics(DepthMap(Tensor(d)), DepthMap(Tensor(d)))
        assert (r.abs_rel, r.sq_rel, r.rmse, r.rmse_log) == (0, 0, 0, 0)
        assert r.n_valid == 16

    def test_double_prediction(self, rng):
        t = rng.uniform(0.1, 0.5, size=(1, 4, 4))
        r = depth_metrics(DepthMap(Tensor(2 * t)), DepthMap(Tensor(t)))
        assert r.abs_rel == pytest.approx(1.0, abs=1e-12)
        assert r.rmse_log == pytest.approx(math.log(2), abs=1e-12)

    def test_closed_form(self):
        r = metric_errors(np.array([1.0, 4.0]), np.array([2.0, 2.0]))
        assert r.abs_rel == pytest.approx(0.75)
        assert r.sq_rel == pytest.approx((0.5 + 2.0) / 2)
        assert r.rmse == pytest.approx(math.sqrt(2.5))
        assert r.rmse_log == pytest.approx(math.log(2))

    def test_metric_scale(self):
        r = depth_metrics(DepthMap(Tensor(np.full((1, 2, 2), 0.2)), 10.0),
                          DepthMap(Tensor(np.full((1, 2, 2), 0.1)), 10.0))
        assert r.rmse == pytest.approx(1.0)

    def test_mask_and_clamp(self):
        r = metric_errors(np.array([0.0, 5.0, 7.0]), np.array([2.0, 0.0, 0.0005]))
        assert r.n_valid == 1
        assert r.rmse_log == pytest.approx(abs(math.log(1e-3) - math.log(2.0)))

    def test_no_valid_pixels(self):
        with pytest.raises(ValueError, match="no valid"):
            metric_errors(np.ones(3), np.zeros(3))

    def test_csv_round_trip(self):
        rows = [(0.3, MetricsReport(0.1, 0.02, 0.381, 0.2, 10)),
                (0.8, MetricsReport(0.072, 0.3, 2.683, 0.1, 10))]
        text = write_report(rows)
        assert text.splitlines()[0] == ",".join(CSV_HEADER) == "alpha,rmse,abs_rel,sq_rel,rmse_log"
        assert text.splitlines()[1] == "0.300000,0.381000,0.100000,0.020000,0.200000"
        parsed = read_report(text)
        assert parsed[1] == {"alpha": 0.8, "rmse": 2.683, "abs_rel": 0.072, "sq_rel": 0.3, "rmse_log": 0.1}

    def test_bad_header(self):
        with pytest.raises(ValueError):
            read_report("a,b\n1,2\n")
