"""Tracer kinetics: plasma input function and two-tissue compartment model.

Region time-activity curves come from the standard two-tissue compartment
ODE driven by a Feng-type plasma input,

    dC1/dt = K1*Cp(t) - (k2 + k3)*C1 + k4*C2
    dC2/dt = k3*C1 - k4*C2
    C_T(t) = C1(t) + C2(t)

with rates in 1/min and time internally in minutes. Integration is
fixed-step classic RK4; frame values are time-averages of C_T over the
frame interval (trapezoidal rule on the RK4 grid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RK4_STEP_S = 0.1


@dataclass(frozen=True)
class FengInput:
    """Feng plasma input Cp(t) = (a1*t - a2 - a3)e^(-l1 t) + a2 e^(-l2 t) + a3 e^(-l3 t).

    Coefficients in activity units, decay constants in 1/min. The defaults
    are FDG-like shape parameters in arbitrary activity units.
    """

    a1: float = 851.1
    a2: float = 21.88
    a3: float = 20.81
    l1: float = 4.134
    l2: float = 0.1191
    l3: float = 0.0104

    def __call__(self, t_min) -> np.ndarray:
        t = np.asarray(t_min, dtype=np.float64)
        return ((self.a1 * t - self.a2 - self.a3) * np.exp(-self.l1 * t)
                + self.a2 * np.exp(-self.l2 * t)
                + self.a3 * np.exp(-self.l3 * t))


@dataclass(frozen=True)
class KineticParams:
    """Two-tissue compartment rates (1/min) plus the plasma input."""

    K1: float
    k2: float
    k3: float = 0.0
    k4: float = 0.0
    plasma: FengInput = FengInput()

    def __post_init__(self):
        if min(self.K1, self.k2, self.k3, self.k4) < 0:
            raise ValueError("kinetic rate constants must be >= 0")


def tissue_curve(params: KineticParams, t_end_s: float,
                 step_s: float = RK4_STEP_S) -> np.ndarray:
    """C_T sampled on the RK4 grid 0, step, ..., t_end (inclusive)."""
    n_steps = int(round(t_end_s / step_s))
    if abs(n_steps * step_s - t_end_s) > 1e-6 * step_s:
        raise ValueError("t_end must be a multiple of the RK4 step")
    h = step_s / 60.0  # minutes
    cp = params.plasma
    grid_half = np.arange(2 * n_steps + 1) * (h / 2.0)
    cp_half = cp(grid_half)

    K1, k2, k3, k4 = params.K1, params.k2, params.k3, params.k4

    def deriv(c1, c2, cp_t):
        d1 = K1 * cp_t - (k2 + k3) * c1 + k4 * c2
        d2 = k3 * c1 - k4 * c2
        return d1, d2

    out = np.empty(n_steps + 1)
    c1 = c2 = 0.0
    out[0] = 0.0
    for k in range(n_steps):
        cp0 = cp_half[2 * k]
        cpm = cp_half[2 * k + 1]
        cp1 = cp_half[2 * k + 2]
        a1, a2 = deriv(c1, c2, cp0)
        b1, b2 = deriv(c1 + 0.5 * h * a1, c2 + 0.5 * h * a2, cpm)
        g1, g2 = deriv(c1 + 0.5 * h * b1, c2 + 0.5 * h * b2, cpm)
        d1, d2 = deriv(c1 + h * g1, c2 + h * g2, cp1)
        c1 += h / 6.0 * (a1 + 2 * b1 + 2 * g1 + d1)
        c2 += h / 6.0 * (a2 + 2 * b2 + 2 * g2 + d2)
        out[k + 1] = c1 + c2
    return out


def frame_average(curve: np.ndarray, starts_s, durations_s,
                  step_s: float = RK4_STEP_S) -> np.ndarray:
    """Average the sampled curve over each [start, start+duration] interval."""
    starts = np.asarray(starts_s, dtype=np.float64)
    durations = np.asarray(durations_s, dtype=np.float64)
    vals = np.empty(len(starts))
    for k, (s, d) in enumerate(zip(starts, durations)):
        i0 = int(round(s / step_s))
        i1 = int(round((s + d) / step_s))
        if abs(i0 * step_s - s) > 1e-6 or abs(i1 * step_s - (s + d)) > 1e-6:
            raise ValueError("frame boundaries must align with the RK4 grid")
        if i1 >= len(curve):
            raise ValueError("curve does not cover the frame interval")
        seg = curve[i0:i1 + 1]
        vals[k] = np.trapezoid(seg, dx=step_s) / (d if d > 0 else 1.0)
    return vals


def region_tac(params: KineticParams, starts_s, durations_s,
               step_s: float = RK4_STEP_S) -> np.ndarray:
    """Frame-averaged tissue activity for one region over a frame schedule."""
    starts = np.asarray(starts_s, dtype=np.float64)
    durations = np.asarray(durations_s, dtype=np.float64)
    if len(starts) == 0:
        raise ValueError("empty frame schedule")
    t_end = float(starts[-1] + durations[-1])
    curve = tissue_curve(params, t_end, step_s)
    return frame_average(curve, starts, durations, step_s)
