"""Image quality metrics and evaluation reports.

PSNR uses the global maximum of the ground-truth series as the peak so
per-frame numbers are comparable across frames and methods. SSIM follows
the standard definition: 11x11 Gaussian window (sigma 1.5), K1=0.01,
K2=0.03, Gaussian-weighted population moments; the local map is averaged
over the evaluation mask restricted to pixels whose window lies fully
inside the frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .simulate import FrameSchedule

PSNR_CAP_DB = 99.0

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # 11x11 window
_SSIM_PAD = 5


def psnr(recon: np.ndarray, truth: np.ndarray, peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE) in dB over all elements, capped at 99."""
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    if peak is None:
        peak = float(truth.max())
    if peak <= 0:
        raise ValueError("truth series has no positive values")
    mse = float(np.mean((recon - truth) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def psnr_frames(recon: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-frame PSNR of a (T, H, W) pair; peak is the series-global max."""
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape or recon.ndim != 3:
        raise ValueError("expected matching (T, H, W) series")
    peak = float(truth.max())
    return np.array([psnr(recon[t], truth[t], peak) for t in range(recon.shape[0])])


def _ssim_map(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    filt = lambda im: gaussian_filter(im, sigma=_SSIM_SIGMA,
                                      truncate=_SSIM_TRUNCATE, mode="reflect")
    ux, uy = filt(a), filt(b)
    vx = filt(a * a) - ux * ux
    vy = filt(b * b) - uy * uy
    vxy = filt(a * b) - ux * uy
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    return ((2 * ux * uy + c1) * (2 * vxy + c2)) / \
           ((ux * ux + uy * uy + c1) * (vx + vy + c2))


def ssim(recon: np.ndarray, truth: np.ndarray, data_range: float | None = None,
         mask: np.ndarray | None = None) -> float:
    """Mean local SSIM of one frame or the frame-mean over a series."""
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    if recon.ndim == 3:
        if data_range is None:
            data_range = float(truth.max() - truth.min())
        return float(np.mean(ssim_frames(recon, truth, data_range, mask)))
    h, w = recon.shape
    win = 2 * _SSIM_PAD + 1
    if h < win or w < win:
        raise ValueError(f"image smaller than the {win}x{win} SSIM window")
    if data_range is None:
        data_range = float(truth.max() - truth.min())
    if data_range <= 0:
        raise ValueError("data range must be positive")
    s = _ssim_map(recon, truth, data_range)
    interior = np.zeros_like(s, dtype=bool)
    interior[_SSIM_PAD:-_SSIM_PAD, _SSIM_PAD:-_SSIM_PAD] = True
    if mask is not None:
        interior &= mask
    if not np.any(interior):
        raise ValueError("empty SSIM evaluation mask")
    return float(s[interior].mean())


def ssim_frames(recon: np.ndarray, truth: np.ndarray,
                data_range: float | None = None,
                mask: np.ndarray | None = None) -> np.ndarray:
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape or recon.ndim != 3:
        raise ValueError("expected matching (T, H, W) series")
    if data_range is None:
        data_range = float(truth.max() - truth.min())
    return np.array([ssim(recon[t], truth[t], data_range, mask)
                     for t in range(recon.shape[0])])


def extract_tac(series: np.ndarray, roi: np.ndarray) -> np.ndarray:
    """Per-frame mean over the ROI mask (single-pixel masks included)."""
    series = np.asarray(series, dtype=np.float64)
    roi = np.asarray(roi, dtype=bool)
    if series.ndim != 3 or roi.shape != series.shape[1:]:
        raise ValueError("roi mask must match the series frame shape")
    if not np.any(roi):
        raise ValueError("empty ROI mask")
    return series[:, roi].mean(axis=1)


def tac_roughness(tac: np.ndarray) -> float:
    """Temporal roughness sum((v[t+1] - v[t])^2); lower is smoother."""
    tac = np.asarray(tac, dtype=np.float64)
    return float(np.sum(np.diff(tac) ** 2))


@dataclass
class MethodMetrics:
    psnr: np.ndarray
    ssim: np.ndarray
    tac: np.ndarray | None = None

    @property
    def mean_psnr(self) -> float:
        return float(self.psnr.mean())

    @property
    def mean_ssim(self) -> float:
        return float(self.ssim.mean())


@dataclass
class MetricsReport:
    methods: dict[str, MethodMetrics]
    schedule: FrameSchedule
    truth_tac: np.ndarray | None = None

    def metrics_rows(self):
        for name, m in self.methods.items():
            for t in range(len(m.psnr)):
                yield name, t, float(m.psnr[t]), float(m.ssim[t])

    def summary_rows(self):
        for name, m in self.methods.items():
            pq = np.percentile(m.psnr, [25, 50, 75])
            sq = np.percentile(m.ssim, [25, 50, 75])
            yield (name, m.mean_psnr, m.mean_ssim,
                   float(pq[1]), float(pq[0]), float(pq[2]),
                   float(sq[1]), float(sq[0]), float(sq[2]))

    def tac_rows(self):
        mids = self.schedule.mid_times
        if self.truth_tac is not None:
            for t, v in enumerate(self.truth_tac):
                yield "truth", float(mids[t]), float(v)
        for name, m in self.methods.items():
            if m.tac is None:
                continue
            for t, v in enumerate(m.tac):
                yield name, float(mids[t]), float(v)


def evaluate(recons: dict[str, np.ndarray], truth: np.ndarray,
             schedule: FrameSchedule, mask: np.ndarray | None = None,
             roi: np.ndarray | None = None) -> MetricsReport:
    """Per-frame PSNR/SSIM for each method, plus ROI TACs when a mask is
    given. Methods are reported in input order."""
    truth = np.asarray(truth, dtype=np.float64)
    if truth.ndim != 3:
        raise ValueError("truth must be (T, H, W)")
    if truth.shape[0] != schedule.n_frames:
        raise ValueError("truth frames do not match the schedule")
    data_range = float(truth.max() - truth.min())
    methods = {}
    for name, rec in recons.items():
        rec = np.asarray(rec, dtype=np.float64)
        if rec.shape != truth.shape:
            raise ValueError(f"recon {name!r} shape {rec.shape} != truth {truth.shape}")
        methods[name] = MethodMetrics(
            psnr=psnr_frames(rec, truth),
            ssim=ssim_frames(rec, truth, data_range, mask),
            tac=extract_tac(rec, roi) if roi is not None else None,
        )
    truth_tac = extract_tac(truth, roi) if roi is not None else None
    return MetricsReport(methods, schedule, truth_tac)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report_csvs(report: MetricsReport, out_dir) -> None:
    import os
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write("method,frame,psnr,ssim\n")
        for row in report.metrics_rows():
            f.write(",".join(_fmt(v) for v in row) + "\n")
    with open(os.path.join(out_dir, "summary.csv"), "w") as f:
        f.write("method,mean_psnr,mean_ssim,psnr_median,psnr_q1,psnr_q3,"
                "ssim_median,ssim_q1,ssim_q3\n")
        for row in report.summary_rows():
            f.write(",".join(_fmt(v) for v in row) + "\n")
    rows = list(report.tac_rows())
    if rows:
        with open(os.path.join(out_dir, "tacs.csv"), "w") as f:
            f.write("method,frame_mid_time_s,value\n")
            for row in rows:
                f.write(",".join(_fmt(v) for v in row) + "\n")
