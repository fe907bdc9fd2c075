"""Dynamic phantoms and Poisson-noisy low-count scan simulation.

A phantom is a list of ellipse regions, each carrying two-tissue
compartment kinetics; later regions sit on top of earlier ones, so a pixel
takes the time-activity curve of the innermost (last listed) region that
contains it. Scan simulation scales each ground-truth frame so the expected
trues hit a per-frame count target, adds a uniform scatter/randoms
expectation, and draws Poisson counts from per-frame seeded substreams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kinetics, precision, projector


@dataclass(frozen=True)
class FrameSchedule:
    """Contiguous dynamic frames: start times and durations in seconds."""

    starts: tuple[float, ...]
    durations: tuple[float, ...]

    def __post_init__(self):
        if len(self.starts) != len(self.durations) or not self.starts:
            raise ValueError("schedule needs matching non-empty starts/durations")
        if any(d <= 0 for d in self.durations):
            raise ValueError("frame durations must be positive")
        for k in range(len(self.starts) - 1):
            if not math.isclose(self.starts[k] + self.durations[k],
                                self.starts[k + 1], abs_tol=1e-9):
                raise ValueError("frames must be contiguous")

    @classmethod
    def from_durations(cls, durations) -> "FrameSchedule":
        durations = tuple(float(d) for d in durations)
        starts = tuple(float(s) for s in np.concatenate([[0.0], np.cumsum(durations)[:-1]]))
        return cls(starts, durations)

    @classmethod
    def default(cls) -> "FrameSchedule":
        """3 x 60 s, 9 x 180 s, 6 x 300 s: 18 frames over 60 minutes."""
        return cls.from_durations([60.0] * 3 + [180.0] * 9 + [300.0] * 6)

    @property
    def n_frames(self) -> int:
        return len(self.starts)

    @property
    def total_duration(self) -> float:
        return self.starts[-1] + self.durations[-1]

    @property
    def mid_times(self) -> np.ndarray:
        return np.asarray(self.starts) + 0.5 * np.asarray(self.durations)


@dataclass(frozen=True)
class EllipseRegion:
    """Ellipse in pixel units relative to the image center, with kinetics."""

    name: str
    center: tuple[float, float]  # (x, y) pixels from image center
    radii: tuple[float, float]   # semi-axes in pixels
    angle_deg: float
    kinetics: kinetics.KineticParams

    def contains(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
        a = math.radians(self.angle_deg)
        dx = xx - self.center[0]
        dy = yy - self.center[1]
        u = dx * math.cos(a) + dy * math.sin(a)
        v = -dx * math.sin(a) + dy * math.cos(a)
        return (u / self.radii[0]) ** 2 + (v / self.radii[1]) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int
    regions: tuple[EllipseRegion, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.regions:
            raise ValueError("phantom needs at least one region")

    def region_index(self, name: str) -> int:
        for k, r in enumerate(self.regions):
            if r.name == name:
                return k
        raise KeyError(f"no region named {name!r}")


def default_phantom_spec(image_size: int, seed: int = 0,
                         jitter: bool = True) -> PhantomSpec:
    """Background + two organs + one hot tumor, geometry and kinetics
    jittered deterministically per seed (jitter=False gives the nominal
    layout regardless of seed)."""
    n = image_size
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(17,)))

    def jit(scale):
        return float(rng.uniform(-scale, scale)) if jitter else 0.0

    def jrate(nominal, spread=0.3):
        if not jitter:
            return nominal
        return float(nominal * np.exp(rng.uniform(-spread, spread)))

    regions = (
        EllipseRegion("background", (jit(0.01 * n), jit(0.01 * n)),
                      (0.44 * n, 0.44 * n), 0.0,
                      kinetics.KineticParams(jrate(0.06), jrate(0.45), jrate(0.012))),
        EllipseRegion("organ_a", (-0.14 * n + jit(0.03 * n), 0.08 * n + jit(0.03 * n)),
                      (0.17 * n * (1 + jit(0.15)), 0.11 * n * (1 + jit(0.15))),
                      20.0 + jit(15.0),
                      kinetics.KineticParams(jrate(0.55), jrate(0.85), jrate(0.02), jrate(0.01))),
        EllipseRegion("organ_b", (0.17 * n + jit(0.03 * n), -0.06 * n + jit(0.03 * n)),
                      (0.10 * n * (1 + jit(0.15)), 0.145 * n * (1 + jit(0.15))),
                      -12.0 + jit(15.0),
                      kinetics.KineticParams(jrate(0.32), jrate(0.55), jrate(0.05))),
        EllipseRegion("tumor", (0.02 * n + jit(0.04 * n), 0.17 * n + jit(0.03 * n)),
                      (0.065 * n * (1 + jit(0.2)), 0.065 * n * (1 + jit(0.2))),
                      0.0,
                      kinetics.KineticParams(jrate(0.28), jrate(0.35), jrate(0.14), jrate(0.003))),
    )
    return PhantomSpec(image_size=n, regions=regions, seed=seed)


def make_phantom(spec: PhantomSpec, sched: FrameSchedule):
    """Render (T, H, W) activity series and an (H, W) integer region map.

    Region map entry is the index of the innermost containing region, -1
    for pixels belonging to none.
    """
    n = spec.image_size
    fov = n / 2.0
    c = np.arange(n) - (n - 1) / 2.0
    yy, xx = np.meshgrid(c, c, indexing="ij")

    region_map = np.full((n, n), -1, dtype=np.int64)
    for idx, reg in enumerate(spec.regions):
        r_extent = math.hypot(*reg.center) + max(reg.radii)
        if r_extent > fov + 1e-9:
            raise ValueError(f"region {reg.name!r} extends outside the field of view")
        region_map[reg.contains(xx, yy)] = idx

    starts = np.asarray(sched.starts)
    durs = np.asarray(sched.durations)
    tacs = np.stack([kinetics.region_tac(reg.kinetics, starts, durs)
                     for reg in spec.regions])

    series = np.zeros((sched.n_frames, n, n), dtype=precision.dtype())
    for idx in range(len(spec.regions)):
        sel = region_map == idx
        if not np.any(sel):
            continue
        for t in range(sched.n_frames):
            series[t][sel] = tacs[idx, t]
    return series, region_map


@dataclass(frozen=True)
class ScanModel:
    """Per-frame expected-count targets plus a uniform background fraction
    standing in for scattered and random events."""

    frame_targets: tuple[float, ...]
    background_fraction: float = 0.0

    def __post_init__(self):
        if any(t <= 0 for t in self.frame_targets):
            raise ValueError("count targets must be positive")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ValueError("background fraction must be in [0, 1)")


def default_frame_targets(sched: FrameSchedule, first: float = 5000.0,
                          last: float = 20000.0) -> tuple[float, ...]:
    """Targets interpolated linearly in frame start time between the two
    anchor counts (first frame, last frame)."""
    starts = np.asarray(sched.starts)
    span = starts[-1] - starts[0]
    if span <= 0:
        return (first,) * sched.n_frames
    return tuple(first + (last - first) * (s - starts[0]) / span for s in starts)


class ScanResult(NamedTuple):
    counts: np.ndarray        # (T, V, B) Poisson counts
    background: np.ndarray    # (T, V, B) expected scatter+randoms
    count_scales: np.ndarray  # (T,) activity -> expected-trues scale per frame


def simulate_scan(truth: np.ndarray, g: projector.ProjectorGeometry,
                  scan: ScanModel, seed: int) -> ScanResult:
    """Scale each frame to its count target, add background, draw counts.

    Per frame t the truth is scaled by c_t so that sum(G x_t * c_t) equals
    target_t * (1 - bg); the background expectation is uniform with total
    target_t * bg. Counts are Poisson draws from independent (seed, frame)
    substreams, so results do not depend on frame evaluation order.
    """
    truth = np.asarray(truth)
    if truth.ndim != 3 or truth.shape[1:] != g.image_shape:
        raise ValueError("truth must be (T, H, W) matching the geometry")
    T = truth.shape[0]
    if len(scan.frame_targets) != T:
        raise ValueError("one count target per frame required")

    V, B = g.sinogram_shape
    counts = np.empty((T, V, B), dtype=np.float64)
    background = np.empty((T, V, B), dtype=np.float64)
    scales = np.empty(T)
    bg = scan.background_fraction
    for t in range(T):
        with precision.double_precision():
            proj = projector.forward_project(g, truth[t].astype(np.float64))
        total = proj.sum()
        target = scan.frame_targets[t]
        if total <= 0.0:
            raise ValueError(f"cannot scale empty frame {t} to {target} counts")
        scales[t] = target * (1.0 - bg) / total
        background[t] = target * bg / (V * B)
        ybar = scales[t] * proj + background[t]
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(t,)))
        counts[t] = rng.poisson(ybar)
    return ScanResult(counts, background, scales)


class NormalizedPair(NamedTuple):
    sinos: np.ndarray
    labels: np.ndarray
    sino_scale: float
    label_scale: float


def normalize_pair(sinos: np.ndarray, labels: np.ndarray) -> NormalizedPair:
    """Divide each series by its own global maximum over all frames.

    Single scalar per series, so relative inter-frame scaling (the temporal
    structure) is untouched.
    """
    sinos = np.asarray(sinos)
    labels = np.asarray(labels)
    s_max = float(sinos.max()) if sinos.size else 0.0
    l_max = float(labels.max()) if labels.size else 0.0
    if s_max <= 0.0 or l_max <= 0.0:
        raise ValueError("cannot normalize an all-zero series")
    return NormalizedPair(sinos / s_max, labels / l_max, s_max, l_max)
