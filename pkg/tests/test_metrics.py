import math
import os

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from stpd import metrics
from stpd.simulate import FrameSchedule


class TestPsnr:
    def test_identical_capped(self):
        t = np.random.default_rng(0).random((3, 16, 16))
        assert metrics.psnr(t, t) == 99.0

    def test_uniform_error_closed_form(self):
        t = np.zeros((2, 16, 16))
        t[:, 4:12, 4:12] = 1.0
        assert metrics.psnr(t + 0.1, t) == pytest.approx(20.0, abs=1e-9)

    def test_independent_oracle(self):
        rng = np.random.default_rng(1)
        truth = rng.random((4, 12, 12))
        rec = rng.random((4, 12, 12))
        got = metrics.psnr(rec, truth)
        # plain-python recomputation
        peak = max(float(v) for v in truth.ravel())
        se = [(float(a) - float(b)) ** 2 for a, b in zip(rec.ravel(), truth.ravel())]
        mse = sum(se) / len(se)
        expected = 10.0 * math.log10(peak * peak / mse)
        assert abs(got - expected) < 1e-9

    def test_all_zero_truth_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            metrics.psnr(np.ones((2, 4, 4)), np.zeros((2, 4, 4)))

    def test_per_frame_uses_global_peak(self):
        truth = np.stack([np.full((12, 12), 1.0), np.full((12, 12), 10.0)])
        rec = truth + 0.1
        vals = metrics.psnr_frames(rec, truth)
        assert vals[0] == pytest.approx(40.0, abs=1e-9)
        assert vals[1] == pytest.approx(40.0, abs=1e-9)


class TestSsim:
    def test_identical_is_one(self):
        a = np.random.default_rng(2).random((16, 16))
        assert metrics.ssim(a, a, data_range=1.0) == 1.0

    def test_anticorrelated_negative(self):
        a = np.random.default_rng(3).random((32, 32))
        assert metrics.ssim(1.0 - a, a, data_range=1.0) < 0

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(4)
        a = rng.random((24, 24))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        dr = float(a.max() - a.min())
        ours = metrics.ssim(b, a, data_range=dr)
        ref = structural_similarity(b, a, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=dr)
        assert abs(ours - ref) < 1e-6

    def test_window_size_guard(self):
        a = np.zeros((8, 8))
        with pytest.raises(ValueError, match="window"):
            metrics.ssim(a, a, data_range=1.0)

    def test_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a, b = rng.random((16, 16)), rng.random((16, 16))
            v = metrics.ssim(a, b, data_range=1.0)
            assert -1.0 <= v <= 1.0


class TestTac:
    def test_uniform_region_exact(self):
        series = np.zeros((3, 8, 8))
        series[0, 2:5, 2:5] = 4.0
        series[1, 2:5, 2:5] = 2.0
        roi = np.zeros((8, 8), dtype=bool)
        roi[2:5, 2:5] = True
        tac = metrics.extract_tac(series, roi)
        assert np.array_equal(tac, [4.0, 2.0, 0.0])

    def test_single_pixel(self):
        rng = np.random.default_rng(6)
        series = rng.random((5, 6, 6))
        roi = np.zeros((6, 6), dtype=bool)
        roi[3, 2] = True
        assert np.array_equal(metrics.extract_tac(series, roi), series[:, 3, 2])

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            metrics.extract_tac(np.zeros((2, 4, 4)), np.zeros((4, 4), dtype=bool))

    def test_roughness(self):
        assert metrics.tac_roughness([1.0, 1.0, 1.0]) == 0.0
        assert metrics.tac_roughness([0.0, 2.0, 1.0]) == 5.0


class TestEvaluate:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(7)
        sched = FrameSchedule.from_durations([600.0] * 4)
        truth = rng.random((4, 16, 16)) * 3.0
        noisy = np.clip(truth + rng.normal(0, 0.3, truth.shape), 0, None)
        roi = np.zeros((16, 16), dtype=bool)
        roi[6:9, 6:9] = True
        return sched, truth, noisy, roi

    def test_identity_recon_rows(self, setup):
        sched, truth, _, roi = setup
        report = metrics.evaluate({"perfect": truth.copy()}, truth, sched, roi=roi)
        m = report.methods["perfect"]
        assert np.all(m.psnr == 99.0)
        assert np.all(m.ssim == 1.0)

    def test_csv_row_count_and_determinism(self, setup, tmp_path):
        sched, truth, noisy, roi = setup
        recons = {"a": noisy, "b": truth * 0.9}
        report = metrics.evaluate(recons, truth, sched, roi=roi)
        metrics.write_report_csvs(report, tmp_path / "r1")
        metrics.write_report_csvs(metrics.evaluate(recons, truth, sched, roi=roi),
                                  tmp_path / "r2")
        body1 = (tmp_path / "r1" / "metrics.csv").read_bytes()
        body2 = (tmp_path / "r2" / "metrics.csv").read_bytes()
        assert body1 == body2
        lines = body1.decode().strip().split("\n")
        assert len(lines) == 1 + 2 * 4  # header + methods x frames
        tac_lines = (tmp_path / "r1" / "tacs.csv").read_text().strip().split("\n")
        assert len(tac_lines) == 1 + 3 * 4  # truth + 2 methods

    def test_summary_quantiles_match_independent_computation(self, setup, tmp_path):
        sched, truth, noisy, _ = setup
        report = metrics.evaluate({"a": noisy}, truth, sched)
        row = next(iter(report.summary_rows()))
        psnrs = sorted(report.methods["a"].psnr)

        def quantile(sorted_vals, q):
            # linear interpolation, independent of numpy
            pos = q * (len(sorted_vals) - 1)
            lo = int(math.floor(pos))
            hi = min(lo + 1, len(sorted_vals) - 1)
            return sorted_vals[lo] + (pos - lo) * (sorted_vals[hi] - sorted_vals[lo])

        assert row[3] == pytest.approx(quantile(psnrs, 0.5), rel=1e-12)
        assert row[4] == pytest.approx(quantile(psnrs, 0.25), rel=1e-12)
        assert row[5] == pytest.approx(quantile(psnrs, 0.75), rel=1e-12)

    def test_shape_mismatch_rejected(self, setup):
        sched, truth, _, _ = setup
        with pytest.raises(ValueError, match="shape"):
            metrics.evaluate({"bad": truth[:, :8]}, truth, sched)

    def test_frame_count_mismatch_rejected(self, setup):
        _, truth, _, _ = setup
        with pytest.raises(ValueError, match="frames"):
            metrics.evaluate({"a": truth}, truth, FrameSchedule.from_durations([60.0]))
