"""Single-plane analysis of where the rendering weight peaks.

A ray meets one plane at angle theta; the SDF along the ray is
f(t) = d - t*sin(theta), crossing zero at t0 = d/sin(theta).  Under the
Laplace-style conversion the weight w(t) = T(t)*sigma(t) peaks not at t0
but at t* = t0 + t_delta with a closed form

    k = 2*sin(theta)              if sin(theta) <= 1/2
    k = 1/m*,  m* = 2 + sin(theta) - sqrt(sin^2(theta) + 4*sin(theta))
                                  otherwise
    t_delta = s * ln(k) / sin(theta)

linear in the conversion width s and changing sign exactly at
sin(theta) = 1/2.  Under the slope-rescaled conversion with constant width
the weight derivative vanishes at t0 (the crossing is critical); a width
varying along the ray with slope s' shifts the density slope at t0 to
(1 - s')/s^2 and the weight slope to -T*s'/s^2.

All of this is checked against a dense numeric oracle: sigma on a 1e5-point
grid over [0, 3*t0], transmittance by trapezoidal integration, argmax and
centered differences read straight off the grid (tests/test_biaslab.py).

This module works in the WIDTH convention throughout (larger s = softer
surface), matching the closed forms; the neural-field modules store the
reciprocal sharpness and convert at their own boundaries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .conversion import density_tuvr, density_volsdf


class DegenerateWeights(Exception):
    """The density is identically zero; argmax of w is undefined."""


class IoError(Exception):
    pass


@dataclass(frozen=True)
class PlaneScenario:
    """One ray hitting one plane: angle theta (radians), distance d, width s."""
    theta: float
    d: float
    s: float

    def __post_init__(self):
        if not (0.0 < self.theta <= math.pi / 2):
            raise ValueError("theta must be in (0, pi/2]")
        if not self.d > 0:
            raise ValueError("d must be > 0")
        if not self.s > 0:
            raise ValueError("s must be > 0")

    @property
    def sin_theta(self) -> float:
        return math.sin(self.theta)

    @property
    def t_zero(self) -> float:
        return self.d / self.sin_theta

    def sdf_along(self, t):
        return self.d - np.asarray(t) * self.sin_theta


@dataclass
class BiasResult:
    t_zero: float
    t_star_closed: float
    t_delta_closed: float
    t_star_numeric: float        # NaN until the numeric oracle fills it
    k: float
    branch: str                  # "leq_half" | "gt_half"


# ---------------------------------------------------------------------------
# closed form
# ---------------------------------------------------------------------------

def closed_form_bias(sc: PlaneScenario) -> BiasResult:
    """Peak location of w(t) for the Laplace-style conversion, exactly."""
    sin_t = sc.sin_theta
    if sin_t <= 0.5:
        k = 2.0 * sin_t
        branch = "leq_half"
    else:
        m_star = 2.0 + sin_t - math.sqrt(sin_t * sin_t + 4.0 * sin_t)
        k = 1.0 / m_star
        branch = "gt_half"
    t_delta = sc.s * math.log(k) / sin_t
    # t_star as t_zero + t_delta keeps the BiasResult identity exact in floats
    return BiasResult(t_zero=sc.t_zero, t_star_closed=sc.t_zero + t_delta,
                      t_delta_closed=t_delta, t_star_numeric=math.nan,
                      k=k, branch=branch)


# ---------------------------------------------------------------------------
# numeric oracle
# ---------------------------------------------------------------------------

def _sigma_on_grid(sc: PlaneScenario, conversion, t: np.ndarray) -> np.ndarray:
    f = sc.sdf_along(t)
    if callable(conversion):
        return np.asarray(conversion(f, sc), dtype=np.float64)
    if conversion == "volsdf":
        return density_volsdf(f, sc.s)
    if conversion == "tuvr":
        return density_tuvr(f, -sc.sin_theta, sc.s)
    raise ValueError(f"unknown conversion {conversion!r}")


def weight_profile(sc: PlaneScenario, conversion="volsdf",
                   n_samples: int = 100_000):
    """(t, w, T, sigma) on a dense grid over [0, 3*t_zero]."""
    t = np.linspace(0.0, 3.0 * sc.t_zero, n_samples)
    sigma = _sigma_on_grid(sc, conversion, t)
    trans = np.exp(-cumulative_trapezoid(sigma, t, initial=0.0))
    return t, trans * sigma, trans, sigma


def numeric_argmax_bias(sc: PlaneScenario, conversion="volsdf",
                        n_samples: int = 100_000) -> float:
    """Grid argmax of w(t); resolution error is at most one grid spacing."""
    if n_samples < 10_000:
        raise ValueError("need at least 1e4 samples for the oracle")
    t, w, _, sigma = weight_profile(sc, conversion, n_samples)
    if not np.any(sigma > 0.0):
        raise DegenerateWeights("density is identically zero on the grid")
    return float(t[np.argmax(w)])


# ---------------------------------------------------------------------------
# criticality of the slope-rescaled conversion
# ---------------------------------------------------------------------------

def tuvr_criticality_check(sc: PlaneScenario, s_prime: float = 0.0,
                           n_samples: int = 150_000) -> dict:
    """Weight and density slopes at the zero crossing, numerically.

    The conversion width along the ray is s(t) = s + s_prime*(t - t0).
    Where the line would go nonpositive (far from the crossing, if s_prime
    is large) it is clamped to a 1e-6*s floor; the SDF magnitude there is
    large, the density exp-suppressed to zero, so the clamp cannot move the
    slopes at t0.  Reports the centered-difference dw/dt and dsigma/dt at
    t0, the analytic density-slope prediction (1 - s_prime)/s^2, and
    whether the crossing is critical (weight slope below 1e-3 of the
    profile's peak slope).
    """
    # grid sized so t0 = the (n-1)/3-th node lands on the grid exactly
    n = 3 * (n_samples // 3) + 1
    t0 = sc.t_zero
    t = np.linspace(0.0, 3.0 * t0, n)
    i0 = (n - 1) // 3
    h_node = 3.0 * t0 / (n - 1)
    if sc.s - abs(s_prime) * 2.0 * h_node <= 0.0:
        raise ValueError("width must stay positive across the stencil at t0")
    width = np.maximum(sc.s + s_prime * (t - t0), 1e-6 * sc.s)
    f = sc.sdf_along(t)
    sigma = density_tuvr(f, -sc.sin_theta, width)
    trans = np.exp(-cumulative_trapezoid(sigma, t, initial=0.0))
    w = trans * sigma
    h = t[1] - t[0]
    dw = (w[i0 + 1] - w[i0 - 1]) / (2.0 * h)
    dsigma = (sigma[i0 + 1] - sigma[i0 - 1]) / (2.0 * h)
    peak = float(np.max(np.abs(np.gradient(w, h))))
    return {
        "t_zero": t0,
        "dw_dt_at_zero": float(dw),
        "peak_slope": peak,
        "is_local_max": abs(dw) < 1e-3 * peak,
        "sigma_prime_at_zero": float(dsigma),
        "sigma_prime_predicted": (1.0 - s_prime) / (sc.s * sc.s),
        "dw_dt_predicted": -float(trans[i0]) * s_prime / (sc.s * sc.s),
        "t_zero_transmittance": float(trans[i0]),
    }


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_HEADER = ["theta", "s", "t_zero", "t_star_closed", "t_delta_closed",
                "t_star_numeric"]


def emit_bias_sweep(theta_grid, s_grid, path: str, d: float = 1.0,
                    n_samples: int = 100_000) -> list[BiasResult]:
    """Closed-form and numeric peak locations over a (theta, s) grid, as CSV.

    Fixed header, 17-significant-digit floats, rows in grid order; the file
    is byte-identical across re-emissions.
    """
    theta_grid = list(theta_grid)
    s_grid = list(s_grid)
    if not theta_grid or not s_grid:
        raise ValueError("grids must be nonempty")
    results = []
    rows = []
    for theta in theta_grid:
        for s in s_grid:
            sc = PlaneScenario(theta=theta, d=d, s=s)
            res = closed_form_bias(sc)
            res.t_star_numeric = numeric_argmax_bias(sc, "volsdf", n_samples)
            results.append(res)
            rows.append([theta, s, res.t_zero, res.t_star_closed,
                         res.t_delta_closed, res.t_star_numeric])
    try:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(SWEEP_HEADER)
            for row in rows:
                out.writerow([f"{v:.17g}" for v in row])
    except OSError as e:
        raise IoError(f"cannot write sweep to {path}: {e}") from e
    return results
