import os

import numpy as np
import pytest

from stpd import kinetics, projector, simulate, tensorio
from stpd.simulate import (EllipseRegion, FrameSchedule, PhantomSpec, ScanModel,
                           default_frame_targets, default_phantom_spec,
                           make_phantom, normalize_pair, simulate_scan)

DATA = os.path.join(os.path.dirname(__file__), "data")


class TestFrameSchedule:
    def test_default_is_18_frames_over_3600s(self):
        s = FrameSchedule.default()
        assert s.n_frames == 18
        assert s.total_duration == 3600.0
        assert s.durations == (60.0,) * 3 + (180.0,) * 9 + (300.0,) * 6

    def test_contiguity_enforced(self):
        with pytest.raises(ValueError, match="contiguous"):
            FrameSchedule((0.0, 70.0), (60.0, 60.0))

    def test_from_durations(self):
        s = FrameSchedule.from_durations([10.0, 20.0, 30.0])
        assert s.starts == (0.0, 10.0, 30.0)


class TestPhantom:
    def test_single_background_constant_inside_fov(self):
        reg = EllipseRegion("background", (0.0, 0.0), (8.0, 8.0), 0.0,
                            kinetics.KineticParams(0.1, 0.3))
        spec = PhantomSpec(16, (reg,))
        sched = FrameSchedule.from_durations([600.0] * 3)
        series, rmap = make_phantom(spec, sched)
        tac = kinetics.region_tac(reg.kinetics, sched.starts, sched.durations)
        inside = rmap == 0
        for t in range(3):
            vals = series[t][inside]
            assert np.allclose(vals, np.float32(tac[t]))
            assert np.all(series[t][~inside] == 0)

    def test_two_disjoint_regions_partition_exactly(self):
        k = kinetics.KineticParams(0.1, 0.3)
        r1 = EllipseRegion("a", (-4.0, 0.0), (2.0, 3.0), 10.0, k)
        r2 = EllipseRegion("b", (4.0, 1.0), (2.5, 1.5), -20.0, k)
        spec = PhantomSpec(20, (r1, r2))
        _, rmap = make_phantom(spec, FrameSchedule.from_durations([60.0]))
        c = np.arange(20) - 9.5
        yy, xx = np.meshgrid(c, c, indexing="ij")
        assert np.array_equal(rmap == 0, r1.contains(xx, yy))
        assert np.array_equal(rmap == 1, r2.contains(xx, yy))

    def test_innermost_region_wins(self):
        k = kinetics.KineticParams(0.1, 0.3)
        outer = EllipseRegion("outer", (0.0, 0.0), (7.0, 7.0), 0.0, k)
        inner = EllipseRegion("inner", (0.0, 0.0), (2.0, 2.0), 0.0,
                              kinetics.KineticParams(0.4, 0.2))
        _, rmap = make_phantom(PhantomSpec(16, (outer, inner)),
                               FrameSchedule.from_durations([60.0]))
        assert rmap[8, 8] == 1
        assert rmap[8, 3] == 0

    def test_region_outside_fov_rejected(self):
        k = kinetics.KineticParams(0.1, 0.3)
        reg = EllipseRegion("big", (4.0, 0.0), (6.0, 6.0), 0.0, k)
        with pytest.raises(ValueError, match="field of view"):
            make_phantom(PhantomSpec(16, (reg,)), FrameSchedule.from_durations([60.0]))

    def test_default_spec_matches_golden_snapshot(self):
        sched = FrameSchedule.from_durations([300.0, 600.0, 900.0, 1800.0])
        truth, rmap = make_phantom(default_phantom_spec(16, seed=3), sched)
        golden = tensorio.read_tensor(os.path.join(DATA, "phantom_golden.stp"))
        golden_map = tensorio.read_tensor(os.path.join(DATA, "phantom_golden_map.stp"))
        assert np.array_equal(truth.astype(np.float64), golden)
        assert np.array_equal(rmap.astype(np.float64), golden_map)

    def test_default_spec_has_required_regions(self):
        spec = default_phantom_spec(32, seed=0)
        names = [r.name for r in spec.regions]
        assert "background" in names and "tumor" in names


class TestScanSimulation:
    @pytest.fixture
    def setup(self):
        g = projector.build_geometry(24, 16, 16)
        sched = FrameSchedule.from_durations([600.0] * 6)
        truth, _ = make_phantom(default_phantom_spec(16, seed=1), sched)
        return g, sched, truth

    def test_frame1_counts_near_target(self, setup):
        g, sched, truth = setup
        scan = ScanModel(default_frame_targets(sched, 5000.0, 20000.0))
        res = simulate_scan(truth, g, scan, seed=9)
        total = res.counts[0].sum()
        assert abs(total - 5000.0) < 3 * np.sqrt(5000.0)

    def test_zero_truth_rejected(self, setup):
        g, sched, _ = setup
        scan = ScanModel((1000.0,) * 6)
        with pytest.raises(ValueError, match="cannot scale empty frame"):
            simulate_scan(np.zeros((6, 16, 16)), g, scan, seed=0)

    def test_doubling_targets_doubles_expectation(self, setup):
        g, sched, truth = setup
        t1 = default_frame_targets(sched)
        r1 = simulate_scan(truth, g, ScanModel(t1), seed=0)
        r2 = simulate_scan(truth, g, ScanModel(tuple(2 * t for t in t1)), seed=0)
        assert np.allclose(r2.count_scales, 2 * r1.count_scales, rtol=1e-15)

    def test_seeded_reproducibility(self, setup):
        g, sched, truth = setup
        scan = ScanModel(default_frame_targets(sched), background_fraction=0.1)
        a = simulate_scan(truth, g, scan, seed=4)
        b = simulate_scan(truth, g, scan, seed=4)
        assert np.array_equal(a.counts, b.counts)
        assert np.array_equal(a.background, b.background)

    def test_background_expectation_split(self, setup):
        g, sched, truth = setup
        scan = ScanModel((2000.0,) * 6, background_fraction=0.25)
        res = simulate_scan(truth, g, scan, seed=1)
        assert np.allclose(res.background[0].sum(), 500.0)
        from stpd import precision
        with precision.double_precision():
            proj = projector.forward_project(g, truth[0].astype(np.float64))
        assert abs(res.count_scales[0] * proj.sum() - 1500.0) < 1e-6

    def test_poisson_sample_mean_matches_expectation(self):
        # 100 seeds on a small sinogram: per-bin mean within 5 standard errors.
        g = projector.build_geometry(6, 8, 8)
        sched = FrameSchedule.from_durations([600.0])
        truth, _ = make_phantom(default_phantom_spec(8, seed=2), sched)
        scan = ScanModel((3000.0,))
        proj = projector.forward_project(g, truth[0].astype(np.float64))
        ybar = scan.frame_targets[0] / proj.sum() * proj
        draws = np.stack([simulate_scan(truth, g, scan, seed=s).counts[0]
                          for s in range(100)])
        se = np.sqrt(np.maximum(ybar, 1e-12) / 100)
        sel = ybar > 0.5
        assert np.all(np.abs(draws.mean(axis=0) - ybar)[sel] < 5 * se[sel])


class TestNormalizePair:
    def test_global_max_becomes_one(self):
        rng = np.random.default_rng(0)
        sinos = rng.random((3, 4, 5)) * 4.0
        sinos[1, 2, 3] = 4.0
        labels = rng.random((3, 6, 6)) * 7.0
        labels[0, 1, 1] = 7.0
        out = normalize_pair(sinos, labels)
        assert out.sinos.max() == 1.0
        assert out.labels.max() == 1.0
        assert out.sino_scale == 4.0 and out.label_scale == 7.0
        assert np.allclose(out.sinos * 4.0, sinos)

    def test_idempotent_on_normalized_series(self):
        rng = np.random.default_rng(1)
        s = rng.random((2, 3, 3))
        s.flat[0] = 1.0
        out = normalize_pair(s, s.copy())
        assert np.array_equal(out.sinos, s)

    def test_frame_max_ratios_preserved(self):
        rng = np.random.default_rng(2)
        sinos = rng.random((4, 5, 5)) * np.arange(1, 5)[:, None, None]
        labels = rng.random((4, 6, 6))
        out = normalize_pair(sinos, labels)
        before = sinos.max(axis=(1, 2))
        after = out.sinos.max(axis=(1, 2))
        assert np.allclose(after / after[0], before / before[0], rtol=1e-12)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="all-zero"):
            normalize_pair(np.zeros((2, 3, 3)), np.ones((2, 3, 3)))
