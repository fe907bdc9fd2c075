"""Classical reconstructions: frame-wise MLEM and spatial-temporal kernel EM.

Both run the same multiplicative EM core (Shepp-Vardi update); the kernel
variant iterates on coefficients with the effective operator G composed
with separable spatial and temporal kernel factors, and returns the
kernel-smoothed image. All arithmetic is float64 regardless of the global
compute precision: the classical baselines are cheap and the EM
monotonicity / count-conservation contracts are tested at tight tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import precision, projector
from .projector import ProjectorGeometry
from .simulate import FrameSchedule


@dataclass(frozen=True)
class KernelOperator:
    """Separable row-normalized kernel: spatial (pixels) x temporal (frames).

    ``None`` factors are exact identities and are skipped entirely, so the
    degenerate operator reproduces plain MLEM bit for bit.
    """

    spatial: sp.csr_matrix | None
    temporal: np.ndarray | None

    @classmethod
    def identity(cls) -> "KernelOperator":
        return cls(None, None)

    @property
    def is_identity(self) -> bool:
        return self.spatial is None and self.temporal is None

    def apply(self, series: np.ndarray) -> np.ndarray:
        """Apply to a (T, n_pixels) array: temporal across frames, then
        spatial across pixels (the factors commute)."""
        out = series
        if self.temporal is not None:
            out = self.temporal @ out
        if self.spatial is not None:
            out = (self.spatial @ out.T).T
        return out

    def apply_adjoint(self, series: np.ndarray) -> np.ndarray:
        out = series
        if self.temporal is not None:
            out = self.temporal.T @ out
        if self.spatial is not None:
            out = (self.spatial.T @ out.T).T
        return out


def poisson_loglik(y: np.ndarray, ybar: np.ndarray) -> float:
    """Poisson log-likelihood sum(y log(ybar) - ybar), constant terms dropped."""
    y = np.asarray(y, dtype=np.float64)
    ybar = np.asarray(ybar, dtype=np.float64)
    pos = ybar > 0
    if np.any(~pos & (y > 0)):
        return -np.inf
    out = float(np.sum(y[pos] * np.log(ybar[pos]) - ybar[pos]))
    return out - float(ybar[~pos].sum())


def _as_series(arr, frame_shape, what):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-2:] != frame_shape:
        raise ValueError(f"{what} shape {arr.shape} does not match geometry {frame_shape}")
    squeeze = arr.ndim == 2
    return (arr[None] if squeeze else arr), squeeze


def _default_x0(g: ProjectorGeometry, T: int) -> np.ndarray:
    x0 = np.where(projector.fov_mask(g), 1.0, 0.0)
    return np.broadcast_to(x0, (T,) + g.image_shape).copy()


def _em_run(y, g, background, n_iter, x0, kernel: KernelOperator | None,
            loglik_out: list | None = None):
    T = y.shape[0]
    V, B = g.sinogram_shape
    P = g.image_size ** 2
    mask = projector.fov_mask(g).ravel()

    with precision.double_precision():
        sens = projector.sensitivity_image(g).ravel()
        sens_series = np.broadcast_to(sens, (T, P)).copy()
        if kernel is not None:
            sens_alpha = kernel.apply_adjoint(sens_series)
        else:
            sens_alpha = sens_series
        upd = sens_alpha > 0

        alpha = x0.reshape(T, P).copy()
        y_flat = y.reshape(T, V * B)
        r_flat = background.reshape(T, V * B)
        for _ in range(n_iter):
            x = kernel.apply(alpha) if kernel is not None else alpha
            ybar = np.empty_like(y_flat)
            for t in range(T):
                ybar[t] = projector.forward_project(
                    g, x[t].reshape(g.image_shape)).ravel()
            ybar += r_flat
            if loglik_out is not None:
                loglik_out.append(poisson_loglik(y_flat, ybar))
            ratio = np.where(ybar > 0, y_flat / np.where(ybar > 0, ybar, 1.0), 0.0)
            bp = np.empty((T, P))
            for t in range(T):
                bp[t] = projector.back_project(
                    g, ratio[t].reshape(g.sinogram_shape)).ravel()
            u = kernel.apply_adjoint(bp) if kernel is not None else bp
            alpha = np.where(upd, alpha * u / np.where(upd, sens_alpha, 1.0), alpha)
            alpha[:, ~mask] = 0.0
        x = kernel.apply(alpha) if kernel is not None else alpha
        if loglik_out is not None:
            ybar = np.empty_like(y_flat)
            for t in range(T):
                ybar[t] = projector.forward_project(
                    g, x[t].reshape(g.image_shape)).ravel()
            loglik_out.append(poisson_loglik(y_flat, ybar + r_flat))
    return x.reshape((T,) + g.image_shape)


def _check_em_inputs(y, g, background, n_iter, x0):
    ys, squeeze = _as_series(y, g.sinogram_shape, "sinogram")
    if np.any(ys < 0):
        raise ValueError("measured counts must be nonnegative")
    T = ys.shape[0]
    if background is None:
        bg = np.zeros_like(ys)
    else:
        bg, bsq = _as_series(background, g.sinogram_shape, "background")
        if bsq != squeeze or bg.shape[0] != T:
            raise ValueError("background shape must match the sinogram series")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    mask = projector.fov_mask(g)
    if x0 is None:
        x0s = _default_x0(g, T)
    else:
        x0s, xsq = _as_series(x0, g.image_shape, "x0")
        if xsq != squeeze or x0s.shape[0] != T:
            raise ValueError("x0 shape must match the sinogram series")
        if np.any(x0s[:, mask] <= 0):
            raise ValueError("x0 must be strictly positive inside the FOV")
        x0s = x0s.copy()
        x0s[:, ~mask] = 0.0
    return ys, bg, x0s, squeeze


def mlem(y: np.ndarray, g: ProjectorGeometry, background=None,
         n_iter: int = 20, x0=None, loglik_out: list | None = None) -> np.ndarray:
    """Frame-wise maximum-likelihood EM.

    x <- (x / s) * G'( y / (G x + r) ) with s = G'1, frames independent.
    When given, ``loglik_out`` collects the Poisson log-likelihood before
    each update and once more after the final one.
    """
    ys, bg, x0s, squeeze = _check_em_inputs(y, g, background, n_iter, x0)
    out = _em_run(ys, g, bg, n_iter, x0s, None, loglik_out)
    return out[0] if squeeze else out


def kem_st(y: np.ndarray, g: ProjectorGeometry, kernel: KernelOperator,
           n_iter: int = 20, x0=None, loglik_out: list | None = None) -> np.ndarray:
    """Spatial-temporal kernel EM: EM on coefficients under G o K, returns
    the kernel-smoothed image K alpha."""
    ys, bg, x0s, squeeze = _check_em_inputs(y, g, None, n_iter, x0)
    out = _em_run(ys, g, bg, n_iter, x0s,
                  None if kernel.is_identity else kernel, loglik_out)
    return out[0] if squeeze else out


def temporal_kernel(n_frames: int, window: int) -> np.ndarray | None:
    """Row-normalized Gaussian in frame-index distance, truncated to the
    window; sigma = window / 6. Window 1 is the identity."""
    if window < 1 or window % 2 == 0:
        raise ValueError("temporal window must be odd and >= 1")
    if window == 1:
        return None
    half = (window - 1) // 2
    sigma = window / 6.0
    idx = np.arange(n_frames)
    d = idx[:, None] - idx[None, :]
    k = np.exp(-(d.astype(np.float64) ** 2) / (2.0 * sigma ** 2))
    k[np.abs(d) > half] = 0.0
    return k / k.sum(axis=1, keepdims=True)


def spatial_kernel(composite: np.ndarray, k_neighbors: int,
                   neighborhood: int = 9) -> sp.csr_matrix | None:
    """k-nearest-neighbor Gaussian kernel over composite-frame features.

    Features are the per-pixel composite values standardized per composite
    frame; candidates live in a neighborhood x neighborhood window; self is
    always selected, remaining ties break toward the lowest pixel index.
    sigma is the per-pixel mean distance to the selected neighbors
    (excluding self); rows are normalized to sum 1.
    """
    if composite.ndim != 3:
        raise ValueError("composite must be (C, H, W)")
    C, H, W = composite.shape
    P = H * W
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    if k_neighbors > P:
        raise ValueError("k_neighbors exceeds the pixel count")
    if k_neighbors == 1:
        return None

    feats = composite.reshape(C, P).astype(np.float64).T.copy()
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd[sd == 0] = 1.0
    feats = (feats - mu) / sd

    half = neighborhood // 2
    offs = [(di, dj) for di in range(-half, half + 1) for dj in range(-half, half + 1)]
    n_cand = len(offs)
    ii, jj = np.divmod(np.arange(P), W)

    cand = np.empty((P, n_cand), dtype=np.int64)
    valid = np.empty((P, n_cand), dtype=bool)
    for c, (di, dj) in enumerate(offs):
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < H) & (nj >= 0) & (nj < W)
        cand[:, c] = np.where(ok, ni * W + nj, 0)
        valid[:, c] = ok

    d2 = np.zeros((P, n_cand))
    for c in range(C):
        diff = feats[cand, c] - feats[:, c][:, None]
        d2 += diff * diff
    d2[~valid] = np.inf
    self_col = offs.index((0, 0))
    d2[np.arange(P), self_col] = -1.0  # self sorts first

    # Stable sort on distance; candidates are in raster order, so ties
    # resolve toward the lowest pixel index.
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_neighbors]
    rows_idx = np.arange(P)[:, None]
    sel_d2 = d2[rows_idx, order]
    sel_ok = np.isfinite(sel_d2)
    sel_d2 = np.where(sel_d2 < 0, 0.0, sel_d2)  # restore true self distance
    sel_cols = cand[rows_idx, order]

    dist = np.sqrt(np.where(sel_ok, sel_d2, 0.0))
    n_others = np.maximum(sel_ok.sum(axis=1) - 1, 1)
    sigma = dist.sum(axis=1) / n_others
    sigma[sigma <= 0] = 1.0
    w = np.exp(-sel_d2 / (2.0 * sigma[:, None] ** 2))
    w[~sel_ok] = 0.0
    w /= w.sum(axis=1, keepdims=True)

    rows = np.broadcast_to(rows_idx, sel_cols.shape)[sel_ok]
    mat = sp.coo_matrix((w[sel_ok], (rows, sel_cols[sel_ok])), shape=(P, P))
    return mat.tocsr()


def build_st_kernel(composite: np.ndarray, n_frames: int,
                    k_neighbors: int = 48, window: int = 15,
                    neighborhood: int = 9) -> KernelOperator:
    """Kernel operator from composite-frame features and a temporal window."""
    return KernelOperator(
        spatial=spatial_kernel(composite, k_neighbors, neighborhood),
        temporal=temporal_kernel(n_frames, window),
    )


def composite_frames(counts: np.ndarray, background: np.ndarray,
                     sched: FrameSchedule, n_groups: int = 3):
    """Rebin a dynamic sinogram series into n_groups count-summed composites
    (grouped by frame mid-time)."""
    T = counts.shape[0]
    if T != sched.n_frames:
        raise ValueError("counts frames do not match the schedule")
    mids = sched.mid_times
    grp = np.minimum((n_groups * mids / sched.total_duration).astype(int),
                     n_groups - 1)
    y_c = np.stack([counts[grp == c].sum(axis=0) for c in range(n_groups)])
    r_c = np.stack([background[grp == c].sum(axis=0) for c in range(n_groups)])
    return y_c, r_c


def composite_recon(counts: np.ndarray, background: np.ndarray,
                    g: ProjectorGeometry, sched: FrameSchedule,
                    n_groups: int = 3, n_iter: int = 20) -> np.ndarray:
    """Cheap MLEM reconstruction of rebinned composites (kernel features)."""
    y_c, r_c = composite_frames(counts, background, sched, n_groups)
    return mlem(y_c, g, r_c, n_iter=n_iter)
