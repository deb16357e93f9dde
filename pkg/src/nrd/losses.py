"""Training losses and their per-stage combination.

Five terms: L1 color, eikonal unit-gradient penalty, the positive-SDF
penalty just past each ray's maximum-weight sample (with its negative-mask
and sky skip rules), a normal-alignment smoothness penalty, and the
weighted stage totals.  The coarse stage combines color + eikonal + bias;
the refinement stage combines color + eikonal + smoothness.

Verified in tests/test_losses.py:
  * hand values for every term (L1 of a known residual, eikonal of norms
    {1.1, 0.9}, alignment penalty of cosines {0, 0.9});
  * skip rules of the bias term: negative mask query, sky rays, and the
    mean taken over all rays including skipped ones;
  * the geometric ramp of the bias weight at its three pinned points;
  * finite-difference gradcheck of every term, and of both stage totals,
    with respect to all field parameters;
  * bookkeeping identity: breakdown.total recombines exactly from parts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .conversion import TUVRLocal
from .field import TapeField, field_eval
from .render import BatchRender, LengthMismatch, RenderContext


class StageModeMismatch(Exception):
    """Stage and renderer configuration disagree (conversion / grad mode)."""


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasRamp:
    """Geometric interpolation lo -> hi over the first ``steps`` steps."""
    lo: float = 0.001
    hi: float = 0.05
    steps: int = 10000

    def __post_init__(self):
        if not (self.lo > 0 and self.hi > 0 and self.steps >= 1):
            raise ValueError("ramp endpoints must be positive, steps >= 1")

    def at(self, step: int) -> float:
        u = min(max(step, 0), self.steps) / self.steps
        return self.lo * (self.hi / self.lo) ** u


@dataclass(frozen=True)
class LossWeights:
    lambda_eik: float = 0.01
    lambda_smooth: float = 0.005
    lambda_bias: object = BiasRamp()      # float or BiasRamp
    eps_bias: float | None = None         # None -> mean sample spacing
    eps_bias_mask: float = 0.01
    eps_smooth: float = 0.01

    def __post_init__(self):
        fixed = [self.lambda_eik, self.lambda_smooth, self.eps_bias_mask,
                 self.eps_smooth]
        if self.eps_bias is not None:
            fixed.append(self.eps_bias)
        if isinstance(self.lambda_bias, (int, float)):
            fixed.append(float(self.lambda_bias))
        elif not isinstance(self.lambda_bias, BiasRamp):
            raise ValueError("lambda_bias must be a number or a BiasRamp")
        if any(v < 0 for v in fixed):
            raise ValueError("loss weights must be >= 0")


def bias_weight(lam, step: int) -> float:
    """Bias-loss weight at a step: a constant or a geometric ramp."""
    if isinstance(lam, BiasRamp):
        return lam.at(step)
    return float(lam)


@dataclass
class LossBreakdown:
    color: float
    eikonal: float
    bias: float
    smooth: float
    total: float
    n_bias_active_rays: int


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------

def loss_color(pred, gt):
    """Mean over rays of the L1 color residual (sum of |diff| per channel).

    ``pred`` may be a tape Var (differentiable path) or a plain array.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if isinstance(pred, tp.Var):
        if pred.value.shape != gt.shape:
            raise LengthMismatch("pred and gt color shapes differ")
        m = gt.shape[0]
        return tp.vsum(tp.absolute(pred - pred.tape.const(gt))) * (1.0 / m)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise LengthMismatch("pred and gt color shapes differ")
    return float(np.abs(pred - gt).sum(axis=1).mean())


def loss_eikonal(grads):
    """Mean of (||g|| - 1)^2 over gradient rows (Var or array)."""
    if isinstance(grads, tp.Var):
        nn = tp.sqrt(tp.vsum(grads * grads, axis=1) + 1e-24)
        d = nn - 1.0
        return tp.mean(d * d)
    g = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    return float(np.mean((np.sqrt((g * g).sum(axis=1) + 1e-24) - 1.0) ** 2))


def loss_bias(tf: TapeField, origins, dirs, t_star, f_samples,
              eps_bias: float, eps_bias_mask: float, scale_bound: float = 0.0,
              sky_skip: bool = True):
    """Positive part of the SDF just past each ray's max-weight sample.

    Per ray: the query point is r(t* + eps_bias).  The ray is skipped when
    the field is already negative at the mask point r(t* + eps_bias_mask)
    (surface already behind t*), and -- when sky_skip is set -- if no
    sampled SDF value along the ray is negative (nothing was hit).  The
    mean runs over ALL rays; skipped rays contribute zero.  Returns the
    loss Var and the number of contributing rays.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t_star = np.atleast_1d(np.asarray(t_star, dtype=np.float64))
    m = origins.shape[0]
    mask_pts = origins + (t_star + eps_bias_mask)[:, None] * dirs
    f_mask, _, _ = field_eval(tf.params, mask_pts, bound=scale_bound,
                              check=False)
    active = f_mask >= 0.0
    if sky_skip:
        active &= np.any(np.asarray(f_samples) < 0.0, axis=1)
    n_active = int(active.sum())
    if n_active == 0:
        return tf.t.const(0.0), 0
    pts = origins[active] + (t_star[active] + eps_bias)[:, None] * dirs[active]
    f_q = tf.geometry(pts, scale_bound)["f"]
    return tp.vsum(tp.relu(f_q)) * (1.0 / m), n_active


def _unit_rows(v: tp.Var) -> tp.Var:
    nn = tp.sqrt(tp.vsum(v * v, axis=1, keepdims=True) + 1e-24)
    return v / tp.clamp_min(nn, 1e-12)


def _alignment_penalty(n: tp.Var, n2: tp.Var) -> tp.Var:
    """Mean of (n . n2 - 1)^2 over unit-normal rows."""
    d = tp.vsum(n * n2, axis=1) - 1.0
    return tp.mean(d * d)


def _perturbation_dirs(normals: np.ndarray, rng) -> np.ndarray:
    """Unit directions orthogonal to each (detached) normal.

    eta = n x tau for a random unit tau, re-drawn while degenerate; the
    directions are constants of the optimization, only the field normals
    at p and p + eps*eta are differentiated.
    """
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64)).copy()
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    n[lens[:, 0] < 1e-12] = (0.0, 0.0, 1.0)   # degenerate normal: any dir works
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    k = n.shape[0]
    eta = np.zeros((k, 3))
    todo = np.ones(k, dtype=bool)
    for _ in range(100):
        if not np.any(todo):
            return eta
        tau = rng.normal(size=(int(todo.sum()), 3))
        tau /= np.maximum(np.linalg.norm(tau, axis=1, keepdims=True), 1e-12)
        e = np.cross(n[todo], tau)
        ok = np.linalg.norm(e, axis=1) >= 1e-6
        rows = np.where(todo)[0][ok]
        eta[rows] = e[ok] / np.linalg.norm(e[ok], axis=1, keepdims=True)
        todo[rows] = False
    raise RuntimeError("could not draw perturbation directions")


def loss_smooth(tf: TapeField, points, eps_smooth: float, rng=None,
                scale_bound: float = 0.0, normals: tp.Var | None = None,
                eta: np.ndarray | None = None):
    """Normal-alignment penalty between each point and a sideways neighbor.

    The neighbor sits at p + eps_smooth * eta with eta orthogonal to the
    (detached) normal; both normals are analytic field gradients on the
    tape, normalized, and compared via the alignment penalty.  The
    directions are constants of one optimization step: they may be passed
    in (``eta``) to pin them across repeated evaluations, e.g. for
    finite-difference gradient verification.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if normals is None:
        ctx1 = tf.geometry(pts, scale_bound, with_tangents=True)
        normals = tp.stack_cols(tf.gradient(ctx1))
    if eta is None:
        if rng is None:
            raise ValueError("need an rng when eta is not supplied")
        eta = _perturbation_dirs(normals.value, rng)
    ctx2 = tf.geometry(pts + eps_smooth * eta, scale_bound, with_tangents=True)
    n2 = tp.stack_cols(tf.gradient(ctx2))
    return _alignment_penalty(_unit_rows(normals), _unit_rows(n2))


def make_smooth_plan(params, br: BatchRender, rng, scale_bound: float = 0.0):
    """Freeze a step's smoothness inputs: near-surface sample indices and
    their perturbation directions.  Passing the result to loss_stage makes
    repeated loss evaluations share one plan, which is what one training
    step does implicitly and what finite-difference checks require."""
    from .field import field_grad_analytic
    near = np.abs(br.f.value).reshape(-1) < 2.0 * float(np.mean(br.delta))
    idx = np.where(near)[0]
    if idx.size == 0:
        return idx, np.zeros((0, 3))
    g = field_grad_analytic(params, br.points[idx], check=False)
    return idx, _perturbation_dirs(g, rng)


# ---------------------------------------------------------------------------
# stage assembly
# ---------------------------------------------------------------------------

def loss_stage(stage: int, tf: TapeField, ctx: RenderContext, br: BatchRender,
               gt_rgb, weights: LossWeights, step: int, rng,
               smooth_plan=None):
    """Weighted stage total as a Var plus its float breakdown.

    Stage 1: color + lambda_eik * eikonal + lambda_bias(step) * bias.
    Stage 2: color + lambda_eik * eikonal + lambda_smooth * smooth, with
    smoothness points taken as the near-surface samples |f| < 2*mean(delta)
    (or from a frozen ``smooth_plan``, see make_smooth_plan).
    """
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    if stage == 1 and isinstance(ctx.mode, TUVRLocal):
        raise StageModeMismatch("coarse stage uses the plain conversion")
    if stage == 2 and ctx.grad_mode != "analytic":
        raise StageModeMismatch("refinement stage needs analytic normals")

    c = loss_color(br.color, gt_rgb)
    eik = loss_eikonal(br.grad)
    lam_e = weights.lambda_eik
    if stage == 1:
        lam_b = bias_weight(weights.lambda_bias, step)
        eps_b = (weights.eps_bias if weights.eps_bias is not None
                 else float(np.mean(br.delta)))
        if lam_b == 0.0:
            # disabled entirely: no probe queries, logged term is exactly 0
            bias, n_act = tf.t.const(0.0), 0
        else:
            bias, n_act = loss_bias(tf, br.origins, br.dirs, br.prob_distance,
                                    br.f.value, eps_b, weights.eps_bias_mask,
                                    ctx.scale_bound)
        total = (c + lam_e * eik) + lam_b * bias
        bd = LossBreakdown(color=float(c.value), eikonal=float(eik.value),
                           bias=float(bias.value), smooth=0.0,
                           total=float(total.value), n_bias_active_rays=n_act)
        return total, bd

    if smooth_plan is not None:
        idx, eta = smooth_plan
    else:
        near = np.abs(br.f.value).reshape(-1) < 2.0 * float(np.mean(br.delta))
        idx, eta = np.where(near)[0], None
    if idx.size:
        smooth = loss_smooth(tf, br.points[idx], weights.eps_smooth, rng,
                             ctx.scale_bound, eta=eta)
    else:
        smooth = tf.t.const(0.0)
    lam_s = weights.lambda_smooth
    total = (c + lam_e * eik) + lam_s * smooth
    bd = LossBreakdown(color=float(c.value), eikonal=float(eik.value),
                       bias=0.0, smooth=float(smooth.value),
                       total=float(total.value), n_bias_active_rays=0)
    return total, bd


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def bias_satisfaction(params, origins, dirs, t_star, eps_bias: float,
                      scale_bound: float = 0.0, select=None) -> float:
    """Fraction of (selected) rays with f(r(t* + eps_bias)) <= 0."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t_star = np.atleast_1d(np.asarray(t_star, dtype=np.float64))
    pts = origins + (t_star + eps_bias)[:, None] * dirs
    f, _, _ = field_eval(params, pts, bound=scale_bound, check=False)
    if select is not None:
        f = f[np.asarray(select)]
    if f.size == 0:
        raise ValueError("no rays selected")
    return float(np.mean(f <= 0.0))
