"""SDF-to-density conversions and the sharpness-bound schedule.

Two reciprocal conventions exist for the conversion scale; this package
stores *sharpness* (larger = sharper surface) everywhere a scale is
scheduled or learned, and converts to the *width* = 1/sharpness at the
formula boundary.  The plain-numpy entry points below take the width, the
tape entry points take sharpness directly since that is what the field
outputs.

Laplace-style conversion (width w):
    f >= 0 : sigma = 1/(2w) * exp(-f/w)
    f <  0 : sigma = 1/w * (1 - 1/2 * exp(f/w))
continuous at f=0 with value 1/(2w), range (0, 1/w].

Directional-derivative rescaled conversion (width w, |f'| floored):
    u = f / (w * |f'|)
    f >= 0 : sigma = 1/w * exp(-u)
    f <  0 : sigma = 2/w * (1 - 1/2 * exp(u))
continuous at f=0 with value 1/w, range (0, 2/w).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp

GRAD_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# conversion modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VolSDFGlobal:
    """One fixed sharpness for the whole field."""
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("global sharpness must be > 0")


@dataclass(frozen=True)
class VolSDFLocal:
    """Per-point sharpness from the field output."""


@dataclass(frozen=True)
class TUVRLocal:
    """Per-point sharpness with the SDF rescaled by its directional slope."""


@dataclass(frozen=True)
class ScaleSchedule:
    s_coarse_bound: float = 100.0
    s_fine_target: float = 3000.0
    fine_ramp_steps: int = 1500

    def __post_init__(self):
        if not (self.s_coarse_bound > 0 and self.s_fine_target >= self.s_coarse_bound):
            raise ValueError("need 0 < s_coarse_bound <= s_fine_target")
        if self.fine_ramp_steps < 1:
            raise ValueError("fine_ramp_steps must be >= 1")


def scale_bound(step: int, stage: int, sched: ScaleSchedule) -> float:
    """Lower bound on sharpness at a given step of a stage."""
    if stage == 1:
        return sched.s_coarse_bound
    k = min(max(step, 0) / sched.fine_ramp_steps, 1.0)
    return sched.s_coarse_bound * (sched.s_fine_target / sched.s_coarse_bound) ** k


def apply_scale_bound(s_raw, step: int, stage: int, sched: ScaleSchedule):
    """Clamp raw sharpness from below by the scheduled bound."""
    return np.maximum(s_raw, scale_bound(step, stage, sched))


# ---------------------------------------------------------------------------
# plain-numpy conversions (width convention)
# ---------------------------------------------------------------------------

def density_volsdf(f, w):
    """Laplace-style density of SDF value(s) ``f`` at width ``w``."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    fp = np.maximum(f, 0.0)
    fn = np.maximum(-f, 0.0)
    pos = 0.5 / w * np.exp(-fp / w)
    neg = 1.0 / w * (1.0 - 0.5 * np.exp(-fn / w))
    return np.where(f >= 0, pos, neg)


def density_tuvr(f, f_dir_deriv, w):
    """Rescaled density; ``f_dir_deriv`` is the SDF slope along the ray."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    g = np.maximum(np.abs(np.asarray(f_dir_deriv, dtype=np.float64)), GRAD_FLOOR)
    up = np.maximum(f, 0.0) / (w * g)
    un = np.maximum(-f, 0.0) / (w * g)
    pos = 1.0 / w * np.exp(-up)
    neg = 2.0 / w * (1.0 - 0.5 * np.exp(-un))
    return np.where(f >= 0, pos, neg)


# ---------------------------------------------------------------------------
# tape conversions (sharpness convention, as produced by the field)
# ---------------------------------------------------------------------------

def density_volsdf_t(f: tp.Var, sharp) -> tp.Var:
    """Tape Laplace-style density from SDF ``f`` and sharpness ``sharp``.

    Both exponential branches are evaluated with sign-split (hence always
    non-positive) exponents so the inactive lane stays finite; ``where``
    then selects per element.
    """
    t = f.tape
    s = t.lift(sharp)
    fp = tp.relu(f)
    fn = tp.relu(-f)
    pos = 0.5 * s * tp.exp(-(fp * s))
    neg = s * (1.0 - 0.5 * tp.exp(-(fn * s)))
    return tp.where(f.value >= 0, pos, neg)


def density_tuvr_t(f: tp.Var, f_dir_deriv: tp.Var, sharp) -> tp.Var:
    """Tape rescaled density from SDF, its slope along the ray, and sharpness."""
    t = f.tape
    s = t.lift(sharp)
    g = tp.clamp_min(tp.absolute(f_dir_deriv), GRAD_FLOOR)
    fp = tp.relu(f)
    fn = tp.relu(-f)
    pos = s * tp.exp(-(fp * s / g))
    neg = 2.0 * s * (1.0 - 0.5 * tp.exp(-(fn * s / g)))
    return tp.where(f.value >= 0, pos, neg)


# ---------------------------------------------------------------------------
# expressiveness solver
# ---------------------------------------------------------------------------

def attainable_density_range(f: float) -> tuple[float, float]:
    """Open/closed density range reachable by varying the width at fixed f.

    f <= 0 reaches any positive density; f > 0 tops out at exp(-1)/(2f)
    (maximized at width = f).
    """
    if f > 0:
        with np.errstate(over="ignore"):
            return 0.0, float(np.exp(-1.0) / (2.0 * f))
    return 0.0, np.inf


def solve_width_for_density(f: float, target: float, tol: float = 1e-12,
                            max_iter: int = 200) -> float:
    """Bisection for a width w with density_volsdf(f, w) == target.

    For f > 0 the search uses the monotone-increasing branch w in (0, f];
    for f <= 0 the density is strictly decreasing in w over (0, inf).
    Raises ValueError when the target lies outside the attainable range.
    """
    if target <= 0:
        raise ValueError("target density must be > 0")
    lo_d, hi_d = attainable_density_range(f)
    if target > hi_d:
        raise ValueError(f"target {target} above attainable max {hi_d}")

    if f > 0:
        lo, hi = f * 1e-12, f   # density increasing on this branch
        increasing = True
    else:
        # bracket the decreasing function: grow hi until density < target
        lo, hi = 1e-300, 1.0
        while density_volsdf(f, hi) > target and hi < 1e280:
            hi *= 10.0
        increasing = False

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi) if hi - lo < 1e280 else np.sqrt(lo * hi)
        d = float(density_volsdf(f, mid))
        if abs(d - target) <= tol * max(1.0, target):
            return mid
        if (d < target) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
