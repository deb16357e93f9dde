"""Ray sampling and discrete volume-rendering quadrature.

The renderer turns a neural SDF into images: stratified samples along each
ray plus one inverse-CDF importance round, SDF-to-density conversion per
the active mode, and standard alpha compositing (piecewise-constant density
per segment) with a solid background color.

Verified in tests/test_render.py:
  * hand alpha-compositing oracle: two segments with sigma*delta = ln 2
    give alpha = [1/2, 1/2], w = [1/2, 1/4], sum(w) = 3/4;
  * opaque and empty-space limits of composite();
  * sum(w) = 1 - T_end to 1e-12 and sum(w) <= 1 over 10k random rays;
  * stratification, determinism, and the uniform fallback of sample_ray;
  * prob_distance against the sphere-trace oracle on an analytic-like field;
  * acc < 0.05 on rays that miss all geometry at high sharpness;
  * LengthMismatch on inconsistent per-sample arrays.

Sample positions are treated as constants on the gradient tape (the
importance round is not differentiated through); densities, weights, and
colors are differentiable in the field parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .conversion import (TUVRLocal, VolSDFGlobal, VolSDFLocal,
                         density_tuvr, density_tuvr_t, density_volsdf,
                         density_volsdf_t)
from .field import (FieldParams, TapeField, _stochastic_probe_points,
                    field_eval, field_eval_with_grad)
from .scenes import Ray


class LengthMismatch(Exception):
    """Per-sample arrays of a single ray disagree in length."""


# ---------------------------------------------------------------------------
# result types
# ---------------------------------------------------------------------------

@dataclass
class RaySampleSet:
    """Quadrature state of one ray: nodes, segments, and compositing terms.

    t strictly increasing; delta > 0; alpha in [0,1]; T non-increasing with
    T[0] = 1; w = T*alpha; sum(w) <= 1 + 1e-9; argmax_index is the first
    index attaining max(w).
    """
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    w: np.ndarray
    argmax_index: int

    @classmethod
    def from_density(cls, t, delta, sigma) -> "RaySampleSet":
        t, delta, sigma = (np.asarray(a, dtype=np.float64) for a in (t, delta, sigma))
        if not (t.shape == delta.shape == sigma.shape and t.ndim == 1):
            raise LengthMismatch("t, delta, sigma must be equal-length 1-D arrays")
        parts = _composite_terms(t[None], delta[None], sigma[None])
        return cls(t=t, delta=delta, sigma=sigma, alpha=parts["alpha"][0],
                   T=parts["T"][0], w=parts["w"][0],
                   argmax_index=int(parts["argmax"][0]))


@dataclass
class RenderResult:
    """Composited output of one ray plus the sample set it came from."""
    color: np.ndarray
    rendered_distance: float
    prob_distance: float
    acc: float
    samples: RaySampleSet
    f: np.ndarray | None = None   # per-sample SDF values, kept for losses


@dataclass(frozen=True)
class RenderContext:
    """Stage-dependent rendering knobs shared by a batch of rays."""
    mode: object                      # VolSDFGlobal | VolSDFLocal | TUVRLocal
    scale_bound: float = 0.0          # sharpness lower bound fed to the field
    n_coarse: int = 48
    n_fine: int = 32
    background: tuple = (1.0, 1.0, 1.0)
    grad_mode: str = "analytic"       # "analytic" | "stochastic"
    eps_max: float = 0.125            # stochastic-step upper bound

    def __post_init__(self):
        if self.n_coarse < 8:
            raise ValueError("n_coarse must be >= 8")
        if self.n_fine < 0:
            raise ValueError("n_fine must be >= 0")
        if self.grad_mode not in ("analytic", "stochastic"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


# ---------------------------------------------------------------------------
# compositing (plain numpy)
# ---------------------------------------------------------------------------

def _composite_terms(t, delta, sigma):
    """Alpha/T/w for a (m, n) batch; same formulas as the tape path.

    The exclusive optical-depth sum is a shifted cumsum, never cumsum minus
    the current term: the subtraction cancels catastrophically when one
    segment's sigma*delta is large, breaking sum(w) = 1 - T_end at 1e-12.
    """
    sd = sigma * delta
    s_inc = np.cumsum(sd, axis=1)
    m = sd.shape[0]
    s_exc = np.concatenate([np.zeros((m, 1)), s_inc[:, :-1]], axis=1)
    T = np.exp(-s_exc)                    # transmittance before each segment
    alpha = 1.0 - np.exp(-sd)
    w = T * alpha
    acc = np.minimum(w.sum(axis=1), 1.0)  # clip float dust above full opacity
    return {"alpha": alpha, "T": T, "w": w, "acc": acc,
            "T_end": np.exp(-s_inc[:, -1]), "argmax": np.argmax(w, axis=1)}


def composite(t, delta, sigma, sample_colors, background) -> RenderResult:
    """Composite one ray's samples into color and distance statistics.

    alpha_i = 1 - exp(-sigma_i*delta_i); T_i is the product of (1-alpha)
    before i; w_i = T_i*alpha_i; color = sum w_i c_i + (1-sum w)*background;
    rendered_distance = sum(w t)/max(sum w, 1e-9); prob_distance is the
    sample with the largest weight (ties to the smallest index).
    """
    samples = RaySampleSet.from_density(t, delta, sigma)
    colors = np.asarray(sample_colors, dtype=np.float64)
    if colors.shape != (samples.t.size, 3):
        raise LengthMismatch("sample_colors must have shape (n, 3)")
    bg = np.asarray(background, dtype=np.float64)
    w, tt = samples.w, samples.t
    acc = min(float(w.sum()), 1.0)
    color = w @ colors + (1.0 - acc) * bg
    rendered = float(w @ tt / max(acc, 1e-9))
    return RenderResult(color=color, rendered_distance=rendered,
                        prob_distance=float(tt[samples.argmax_index]),
                        acc=acc, samples=samples)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _stratified(t_near, t_far, n, rng):
    """(m, n) stratified nodes, one uniform draw per stratum."""
    m = t_near.shape[0]
    u = (np.arange(n) + rng.uniform(size=(m, n))) / n
    return t_near[:, None] + u * (t_far - t_near)[:, None]


def _segment_bounds(t, t_near, t_far):
    """(m, n+1) segment boundaries: near end, midpoints, far end."""
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    return np.concatenate([t_near[:, None], mid, t_far[:, None]], axis=1)


def _invert_cdf(bins, weights, u):
    """Inverse-CDF draw of len(u) nodes per row from per-bin weights.

    Rows whose weights sum to zero fall back to weights proportional to bin
    width, i.e. uniform over [t_near, t_far].
    """
    widths = np.diff(bins, axis=1)
    wsum = weights.sum(axis=1, keepdims=True)
    weights = np.where(wsum > 0.0, weights, widths)
    pdf = weights / weights.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((bins.shape[0], 1)), np.cumsum(pdf, axis=1)],
                         axis=1)
    cdf[:, -1] = 1.0
    idx = (cdf[:, 1:-1, None] <= u[:, None, :]).sum(axis=1)      # (m, k)
    lo = np.take_along_axis(cdf, idx, axis=1)
    hi = np.take_along_axis(cdf, idx + 1, axis=1)
    frac = (u - lo) / np.maximum(hi - lo, 1e-32)
    b_lo = np.take_along_axis(bins, idx, axis=1)
    b_hi = np.take_along_axis(bins, idx + 1, axis=1)
    return b_lo + frac * (b_hi - b_lo)


def _coarse_sigma(params, points, dirs_rep, mode, bound):
    """Off-tape density at coarse nodes, used only to shape the fine draw."""
    if isinstance(mode, TUVRLocal):
        f, s, _, g = field_eval_with_grad(params, points, bound=bound,
                                          check=False)
        f_dir = np.einsum("ij,ij->i", g, dirs_rep)
        return density_tuvr(f, f_dir, 1.0 / s)
    f, s, _ = field_eval(params, points, bound=bound, check=False)
    if isinstance(mode, VolSDFGlobal):
        return density_volsdf(f, 1.0 / mode.s)
    if isinstance(mode, VolSDFLocal):
        return density_volsdf(f, 1.0 / s)
    raise ValueError(f"unknown conversion mode {mode!r}")


def _sort_rows(t):
    t = np.sort(t, axis=1)
    # Coincident nodes would give a zero-length segment; nudge them apart.
    while np.any(t[:, 1:] <= t[:, :-1]):
        bad = t[:, 1:] <= t[:, :-1]
        t[:, 1:][bad] = np.nextafter(t[:, :-1][bad], np.inf)
    return t


def _sample_batch(params, origins, dirs, t_near, t_far, ctx, rng):
    """(m, n) sorted nodes: stratified coarse + one importance round."""
    t_c = _stratified(t_near, t_far, ctx.n_coarse, rng)
    if ctx.n_fine == 0:
        return _sort_rows(t_c)
    u = rng.uniform(size=(t_c.shape[0], ctx.n_fine))
    bounds = _segment_bounds(t_c, t_near, t_far)
    delta_c = np.diff(bounds, axis=1)
    pts = (origins[:, None, :] + t_c[..., None] * dirs[:, None, :]).reshape(-1, 3)
    dirs_rep = np.repeat(dirs, ctx.n_coarse, axis=0)
    sigma_c = _coarse_sigma(params, pts, dirs_rep, ctx.mode,
                            ctx.scale_bound).reshape(t_c.shape)
    w_c = _composite_terms(t_c, delta_c, sigma_c)["w"]
    t_f = _invert_cdf(bounds, w_c, u)
    return _sort_rows(np.concatenate([t_c, t_f], axis=1))


def sample_ray(ray: Ray, n_coarse: int, n_fine: int, rng, params: FieldParams,
               mode=None, scale_bound: float = 0.0):
    """Quadrature nodes and segment lengths for one ray.

    Stratified uniform in [t_near, t_far]; when n_fine > 0, one importance
    round shaped by the coarse weights (inverse CDF, uniform fallback when
    every coarse weight is zero).  Deterministic for a given rng state.
    """
    if not ray.t_far > ray.t_near:
        raise ValueError("ray has an empty [t_near, t_far] interval")
    ctx = RenderContext(mode=mode if mode is not None else VolSDFLocal(),
                        scale_bound=scale_bound, n_coarse=n_coarse,
                        n_fine=n_fine)
    t = _sample_batch(params, ray.origin[None], ray.direction[None],
                      np.array([ray.t_near]), np.array([ray.t_far]), ctx, rng)
    delta = np.diff(_segment_bounds(t, np.array([ray.t_near]),
                                    np.array([ray.t_far])), axis=1)
    return t[0], delta[0]


# ---------------------------------------------------------------------------
# differentiable batch rendering
# ---------------------------------------------------------------------------

@dataclass
class BatchRender:
    """Tape Vars plus constant per-sample geometry for one rendered batch."""
    color: tp.Var                 # (m, 3)
    acc: tp.Var                   # (m,)
    w: tp.Var                     # (m, n)
    f: tp.Var                     # (m, n) SDF at the nodes
    sigma: tp.Var                 # (m, n)
    grad: tp.Var                  # (m*n, 3) field gradient per node
    scale: tp.Var                 # (m*n,) local sharpness
    t: np.ndarray                 # (m, n)
    delta: np.ndarray             # (m, n)
    points: np.ndarray            # (m*n, 3)
    origins: np.ndarray           # (m, 3)
    dirs: np.ndarray              # (m, 3)
    argmax_index: np.ndarray      # (m,)
    prob_distance: np.ndarray     # (m,)
    rendered_distance: np.ndarray  # (m,)
    acc_np: np.ndarray            # (m,) clipped to [0, 1]
    T_end: np.ndarray             # (m,)
    grad_step: np.ndarray | None  # (m*n,) stochastic step, None when analytic


def render_batch(tf: TapeField, origins, dirs, t_near, t_far,
                 ctx: RenderContext, rng) -> BatchRender:
    """Render m rays on the tape of ``tf``; all rays must be non-empty.

    The rng is consumed in a fixed order (coarse strata, fine draws, then
    the stochastic steps if active), so a seeded generator reproduces the
    batch exactly.
    """
    t = tf.t
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    if not np.all(t_far > t_near):
        raise ValueError("render_batch requires t_far > t_near for every ray")
    m = origins.shape[0]

    nodes = _sample_batch(tf.params, origins, dirs, t_near, t_far, ctx, rng)
    n = nodes.shape[1]
    delta = np.diff(_segment_bounds(nodes, t_near, t_far), axis=1)
    points = (origins[:, None, :] + nodes[..., None] * dirs[:, None, :]).reshape(-1, 3)
    dirs_rep = np.repeat(dirs, n, axis=0)
    mn = m * n

    # -- geometry + spatial gradient ---------------------------------------
    grad_step = None
    if ctx.grad_mode == "stochastic":
        eps = ctx.eps_max * (1.0 - rng.uniform(size=mn))
        probes = _stochastic_probe_points(points, eps).reshape(-1, 3)
        g_ctx = tf.geometry(np.concatenate([points, probes]), ctx.scale_bound,
                            n_primary=mn)
        f = tp.segment(g_ctx["f"], 0, mn)
        s, z = g_ctx["s"], g_ctx["z"]
        inv2e = t.const(1.0 / (2.0 * eps))
        comps = []
        for a in range(3):
            fp = tp.segment(g_ctx["f"], (1 + 2 * a) * mn, (2 + 2 * a) * mn)
            fm = tp.segment(g_ctx["f"], (2 + 2 * a) * mn, (3 + 2 * a) * mn)
            comps.append((fp - fm) * inv2e)
        grad = tp.stack_cols(comps)
        grad_step = eps
    else:
        g_ctx = tf.geometry(points, ctx.scale_bound, with_tangents=True)
        f, s, z = g_ctx["f"], g_ctx["s"], g_ctx["z"]
        grad = tp.stack_cols(tf.gradient(g_ctx))

    # -- density per the conversion mode ------------------------------------
    if isinstance(ctx.mode, VolSDFGlobal):
        sigma_flat = density_volsdf_t(f, ctx.mode.s)
    elif isinstance(ctx.mode, VolSDFLocal):
        sigma_flat = density_volsdf_t(f, s)
    elif isinstance(ctx.mode, TUVRLocal):
        f_dir = tp.vsum(grad * t.const(dirs_rep), axis=1)
        sigma_flat = density_tuvr_t(f, f_dir, s)
    else:
        raise ValueError(f"unknown conversion mode {ctx.mode!r}")

    # -- compositing ---------------------------------------------------------
    # exclusive optical depth via a shifted cumsum (see _composite_terms)
    sd = tp.reshape(sigma_flat, (m, n)) * t.const(delta)
    s_inc = tp.cumsum(sd, axis=1)
    s_exc = tp.concat([t.const(np.zeros((m, 1))), tp.getcols(s_inc, 0, n - 1)],
                      axis=1)
    trans = tp.exp(-s_exc)
    alpha = 1.0 - tp.exp(-sd)
    w = trans * alpha
    acc = tp.vsum(w, axis=1)

    rgb = tf.color(points, dirs_rep, grad, z)
    w3 = tp.reshape(w, (m, n, 1))
    c3 = tp.reshape(rgb, (m, n, 3))
    bg = t.const(np.asarray(ctx.background, dtype=np.float64))
    color = tp.vsum(w3 * c3, axis=1) + tp.reshape(1.0 - acc, (m, 1)) * bg

    w_np = w.value
    acc_np = np.minimum(w_np.sum(axis=1), 1.0)
    argmax = np.argmax(w_np, axis=1)
    prob = nodes[np.arange(m), argmax]
    rendered = (w_np * nodes).sum(axis=1) / np.maximum(acc_np, 1e-9)
    return BatchRender(
        color=color, acc=acc, w=w, f=tp.reshape(f, (m, n)),
        sigma=tp.reshape(sigma_flat, (m, n)), grad=grad, scale=s,
        t=nodes, delta=delta, points=points, origins=origins, dirs=dirs,
        argmax_index=argmax, prob_distance=prob, rendered_distance=rendered,
        acc_np=acc_np, T_end=np.exp(-s_inc.value[:, -1]), grad_step=grad_step)


# ---------------------------------------------------------------------------
# plain-array entry points
# ---------------------------------------------------------------------------

def render_rays(params: FieldParams, origins, dirs, t_near, t_far,
                ctx: RenderContext, rng) -> dict:
    """Batch render to plain arrays; rays with an empty interval get the
    background color, zero acc, and zero distances."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    m = origins.shape[0]
    out = {
        "color": np.tile(np.asarray(ctx.background, dtype=np.float64), (m, 1)),
        "acc": np.zeros(m), "prob_distance": np.zeros(m),
        "rendered_distance": np.zeros(m), "T_end": np.ones(m),
    }
    valid = t_far > t_near
    if np.any(valid):
        tape = tp.Tape()
        tf = TapeField(tape, params)
        br = render_batch(tf, origins[valid], dirs[valid], t_near[valid],
                          t_far[valid], ctx, rng)
        out["color"][valid] = br.color.value
        out["acc"][valid] = br.acc_np
        out["prob_distance"][valid] = br.prob_distance
        out["rendered_distance"][valid] = br.rendered_distance
        out["T_end"][valid] = br.T_end
        out["batch"] = br
        out["valid"] = valid
    return out


def render_ray(params: FieldParams, ray: Ray, ctx: RenderContext,
               rng) -> RenderResult:
    """Render a single non-empty ray to a RenderResult."""
    if not ray.t_far > ray.t_near:
        raise ValueError("ray has an empty [t_near, t_far] interval")
    tape = tp.Tape()
    tf = TapeField(tape, params)
    br = render_batch(tf, ray.origin[None], ray.direction[None],
                      np.array([ray.t_near]), np.array([ray.t_far]), ctx, rng)
    samples = RaySampleSet.from_density(br.t[0], br.delta[0],
                                        br.sigma.value[0])
    return RenderResult(
        color=br.color.value[0], rendered_distance=float(br.rendered_distance[0]),
        prob_distance=float(br.prob_distance[0]), acc=float(br.acc_np[0]),
        samples=samples, f=br.f.value[0])


def render_image(params: FieldParams, camera, ctx: RenderContext, rng,
                 chunk: int = 4096) -> np.ndarray:
    """Render a full camera view to an (H, W, 3) image, in chunks of rays."""
    from .dataset import camera_rays
    o, d, tn, tf_ = camera_rays(camera)
    colors = np.empty((o.shape[0], 3))
    for i in range(0, o.shape[0], chunk):
        sl = slice(i, i + chunk)
        colors[sl] = render_rays(params, o[sl], d[sl], tn[sl], tf_[sl],
                                 ctx, rng)["color"]
    return colors.reshape(camera.height, camera.width, 3)
