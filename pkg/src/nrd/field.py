"""Multi-resolution feature-grid field with geometry and color heads.

The geometry network maps a point p in [-1,1]^3 to (f, s, z): SDF value,
local sharpness, and a feature vector.  Positions are encoded by trilinear
interpolation over L dense grids whose resolutions grow geometrically, the
concatenated features feed a softplus MLP, and the SDF channel is offset by
the analytic shell ||p|| - init_radius so training starts from a sphere.
A separate linear head off the last hidden layer produces the raw sharpness,
mapped to s = bound + softplus(raw) so s can never fall below the scheduled
bound.  The color network is a relu MLP over (p, view_dir, normal, z) with a
sigmoid squash.

Everything is recorded on a tape, so the same code path serves plain
evaluation (values of a throwaway tape) and training (backward through the
recorded graph).  Spatial derivatives come from a forward tangent pass that
is itself built from tape ops — the tangent of trilinear interpolation is a
gather with derivative weights, and the tangent of softplus(z) is
sigmoid(z) * tangent — which keeps df/dx differentiable with respect to the
parameters without second-order autodiff.

Checkpoint file ("NRCK"): magic, u32 version, u32 tensor count, then per
tensor a length-prefixed name, u32 ndim, u32 dims, and f64 little-endian
data.  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from . import tape as tp

CKPT_MAGIC = b"NRCK"
CKPT_VERSION = 1


class NonFiniteParams(Exception):
    """Field parameters contain NaN or Inf."""


@dataclass(frozen=True)
class FieldConfig:
    n_levels: int = 8
    r_min: int = 16
    r_max: int = 128
    channels: int = 2
    geo_width: int = 64
    geo_depth: int = 2
    feat_dim: int = 15
    color_width: int = 64
    color_depth: int = 2
    condition_on_normal: bool = True

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("need at least 2 grid levels")
        if not (1 <= self.r_min <= self.r_max):
            raise ValueError("need 1 <= r_min <= r_max")
        if self.geo_depth < 1 or self.color_depth < 1:
            raise ValueError("MLP depth must be >= 1")

    def level_resolutions(self) -> list[int]:
        """Cells per axis for each level, geometric from r_min to r_max."""
        g = (self.r_max / self.r_min) ** (1.0 / (self.n_levels - 1))
        return [int(round(self.r_min * g ** k)) for k in range(self.n_levels)]

    def enc_dim(self) -> int:
        return self.n_levels * self.channels

    def color_in_dim(self) -> int:
        return 3 + 3 + 3 + self.feat_dim


@dataclass
class FieldParams:
    cfg: FieldConfig
    tensors: dict = dc_field(default_factory=dict)

    def check_finite(self):
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteParams(f"tensor {k} has non-finite entries")

    @property
    def init_radius(self) -> float:
        return float(self.tensors["init_radius"][0])


def init_field_params(cfg: FieldConfig, seed: int = 0) -> FieldParams:
    """Fresh parameters: tiny random grids, orthodox MLP init, zeroed heads.

    The geometry output layer and scale head start at zero so the initial
    SDF is exactly the geometric offset (once init_geometric sets a radius)
    and the initial sharpness is bound + softplus(0).
    """
    rng = np.random.default_rng(seed)
    t = {}
    for k, r in enumerate(cfg.level_resolutions()):
        v = r + 1
        t[f"grid{k}"] = rng.uniform(-1e-4, 1e-4, size=(v**3, cfg.channels))

    def dense(n_in, n_out, gain):
        return rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))

    d_in = cfg.enc_dim()
    for k in range(cfg.geo_depth):
        t[f"geo_w{k}"] = dense(d_in if k == 0 else cfg.geo_width, cfg.geo_width, 1.0)
        t[f"geo_b{k}"] = np.zeros(cfg.geo_width)
    t["geo_out_w"] = np.zeros((cfg.geo_width, 1 + cfg.feat_dim))
    t["geo_out_b"] = np.zeros(1 + cfg.feat_dim)
    t["scale_w"] = np.zeros((cfg.geo_width, 1))
    t["scale_b"] = np.zeros(1)

    c_in = cfg.color_in_dim()
    for k in range(cfg.color_depth):
        t[f"col_w{k}"] = dense(c_in if k == 0 else cfg.color_width, cfg.color_width,
                               np.sqrt(2.0))
        t[f"col_b{k}"] = np.zeros(cfg.color_width)
    t["col_out_w"] = rng.normal(0.0, 1e-2, size=(cfg.color_width, 3))
    t["col_out_b"] = np.zeros(3)
    t["init_radius"] = np.zeros(1)
    return FieldParams(cfg, t)


def init_geometric(params: FieldParams, radius: float):
    """Start the SDF as the shell ||p|| - radius.

    Zeroes the geometry output layer and scale head so the residual vanishes;
    the offset then dominates and sign(f) matches the sphere everywhere.
    """
    if not (0.0 < radius < 1.0):
        raise ValueError("radius must lie in (0,1)")
    params.tensors["init_radius"] = np.array([float(radius)])
    params.tensors["geo_out_w"][:] = 0.0
    params.tensors["geo_out_b"][:] = 0.0
    params.tensors["scale_w"][:] = 0.0
    params.tensors["scale_b"][:] = 0.0


# ---------------------------------------------------------------------------
# position encoding (constants of the tape graph)
# ---------------------------------------------------------------------------

_CORNERS = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1)
                     for dz in (0, 1)], dtype=np.float64)  # (8,3)
_CORNER_MASK = _CORNERS.astype(bool)


def encode_positions(cfg: FieldConfig, p: np.ndarray):
    """Trilinear corner indices and weights per level, plus weight gradients.

    Returns a list over levels of dicts with ``idx`` (N,8) int and ``w``
    (N,8); ``level_dw(entry)`` lazily yields (3,N,8) = d(w)/d(p_axis), which
    only the analytic-gradient path pays for.  Points are clamped to
    [-1,1]^3 with zero weight-gradient outside (and exactly on) the
    boundary.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    pc = np.clip(p, -1.0, 1.0)
    interior = (np.abs(p) < 1.0).astype(np.float64)       # (N,3)
    out = []
    for r in cfg.level_resolutions():
        v = float(r + 1)
        u = (pc + 1.0) * 0.5 * r                           # [0, r]
        c = np.clip(np.floor(u), 0, r - 1)                 # (N,3)
        fr = u - c                                         # [0,1]
        cw = np.where(_CORNER_MASK[None, :, :], fr[:, None, :],
                      1.0 - fr[:, None, :])                # (N,8,3)
        w = cw[:, :, 0] * cw[:, :, 1]
        w *= cw[:, :, 2]                                   # (N,8)
        fi = (c[:, 0, None] + _CORNERS[None, :, 0]) * v
        fi += c[:, 1, None] + _CORNERS[None, :, 1]
        fi *= v
        fi += c[:, 2, None] + _CORNERS[None, :, 2]
        idx = fi.astype(np.int64)                          # exact: idx < 2^27
        du = 0.5 * r * interior                            # du/dp per axis
        out.append({"idx": idx, "w": w, "cw": cw, "du": du, "dw": None})
    return out


def level_dw(entry: dict) -> np.ndarray:
    """(3,N,8) weight gradients of one encode level, computed on first use."""
    if entry["dw"] is None:
        cw, du = entry["cw"], entry["du"]
        sign = 2.0 * _CORNERS - 1.0                        # d(cw)/d(fr)
        dw = np.empty((3, cw.shape[0], 8))
        for a in range(3):
            others = [b for b in range(3) if b != a]
            dw[a] = cw[:, :, others[0]] * cw[:, :, others[1]] \
                * (du[:, None, a] * sign[None, :, a])
        entry["dw"] = dw
    return entry["dw"]


def offset_and_grad(params: FieldParams, p: np.ndarray):
    """Geometric SDF offset ||p|| - radius and its spatial gradient."""
    p = np.atleast_2d(p)
    radius = params.init_radius
    if radius <= 0.0:
        return np.zeros(p.shape[0]), np.zeros_like(p)
    n = np.sqrt(np.sum(p * p, axis=1) + 1e-18)
    return n - radius, p / n[:, None]


# ---------------------------------------------------------------------------
# tape evaluation
# ---------------------------------------------------------------------------

class TapeField:
    """One batch of field evaluations recorded on a tape.

    Leaf Vars for every parameter tensor are created once per tape and
    shared across geometry, tangent, and color passes, so ``backward`` on a
    loss yields one gradient per tensor.
    """

    def __init__(self, t: tp.Tape, params: FieldParams):
        self.t = t
        self.params = params
        self.cfg = params.cfg
        self.vars = {k: t.leaf(v, name=k) for k, v in params.tensors.items()
                     if k != "init_radius"}

    # -- geometry ----------------------------------------------------------
    def geometry(self, p: np.ndarray, bound: float,
                 with_tangents: bool = False, n_primary: int | None = None):
        """Returns a context dict with f, s, z Vars and tangent caches.

        ``with_tangents=True`` gathers the trilinear weight gradients
        together with the weights in one fused grid op per level, so the
        backward pass scatters each grid once instead of four times; use it
        whenever ``tangent``/``gradient`` will be called on the result.
        ``n_primary`` restricts the scale and feature heads to the first n
        rows — the tail rows (finite-difference probes) then contribute
        only ``f``, which is all their callers read.
        """
        cfg, t = self.cfg, self.t
        p = np.atleast_2d(p)
        enc_levels = encode_positions(cfg, p)
        C = cfg.channels
        tfeats = None
        if with_tangents:
            feats, tfeats = [], ([], [], [])
            for k, lv in enumerate(enc_levels):
                ws = np.concatenate([lv["w"][None], level_dw(lv)], axis=0)
                g4 = tp.grid_gather_multi(self.vars[f"grid{k}"], lv["idx"], ws)
                feats.append(tp.getcols(g4, 0, C))
                for a in range(3):
                    tfeats[a].append(tp.getcols(g4, (1 + a) * C, (2 + a) * C))
        else:
            feats = [tp.grid_gather(self.vars[f"grid{k}"], lv["idx"], lv["w"])
                     for k, lv in enumerate(enc_levels)]
        h = tp.concat(feats, axis=1)
        pre = []
        for k in range(cfg.geo_depth):
            z = tp.matmul(h, self.vars[f"geo_w{k}"]) + self.vars[f"geo_b{k}"]
            pre.append(z)
            h = tp.softplus(z)
        off, doff = offset_and_grad(self.params, p)
        if n_primary is None:
            out = tp.matmul(h, self.vars["geo_out_w"]) + self.vars["geo_out_b"]
            f = tp.col(out, 0) + t.const(off)
            z_feat = tp.getcols(out, 1, 1 + cfg.feat_dim)
            hs = h
        else:
            w_f = tp.getcols(self.vars["geo_out_w"], 0, 1)
            b_f = tp.segment(self.vars["geo_out_b"], 0, 1)
            f = tp.col(tp.matmul(h, w_f), 0) + b_f + t.const(off)
            hs = tp.segment(h, 0, n_primary)
            w_z = tp.getcols(self.vars["geo_out_w"], 1, 1 + cfg.feat_dim)
            b_z = tp.segment(self.vars["geo_out_b"], 1, 1 + cfg.feat_dim)
            z_feat = tp.matmul(hs, w_z) + b_z
        raw = tp.col(tp.matmul(hs, self.vars["scale_w"]), 0) + self.vars["scale_b"]
        s = tp.softplus(raw) + float(bound)
        return {"p": p, "enc": enc_levels, "pre": pre, "doff": doff,
                "f": f, "s": s, "z": z_feat, "tfeats": tfeats}

    def tangent(self, ctx, axis: int) -> tp.Var:
        """df/dp_axis of a geometry pass, as a differentiable Var (N,)."""
        cfg = self.cfg
        if ctx["tfeats"] is not None:
            v = tp.concat(ctx["tfeats"][axis], axis=1)
        else:
            vt = [tp.grid_gather(self.vars[f"grid{k}"], lv["idx"],
                                 level_dw(lv)[axis])
                  for k, lv in enumerate(ctx["enc"])]
            v = tp.concat(vt, axis=1)
        for k in range(cfg.geo_depth):
            u = tp.matmul(v, self.vars[f"geo_w{k}"])
            v = tp.sigmoid(ctx["pre"][k]) * u
        out_t = tp.matmul(v, self.vars["geo_out_w"])
        return tp.col(out_t, 0) + self.t.const(ctx["doff"][:, axis])

    def gradient(self, ctx) -> list:
        """[df/dx, df/dy, df/dz] Vars of a geometry pass."""
        return [self.tangent(ctx, a) for a in range(3)]

    # -- color ---------------------------------------------------------------
    def color(self, p: np.ndarray, view_dir: np.ndarray, normal, z: tp.Var) -> tp.Var:
        """RGB in [0,1]; ``normal`` may be a Var (N,3) or a constant array."""
        cfg, t = self.cfg, self.t
        p = np.atleast_2d(p)
        v = np.atleast_2d(view_dir)
        v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
        n = t.lift(normal if isinstance(normal, tp.Var) else np.atleast_2d(normal))
        nn = tp.sqrt(tp.vsum(n * n, axis=1, keepdims=True) + 1e-24)
        n_unit = n / tp.clamp_min(nn, 1e-12)
        if not cfg.condition_on_normal:
            n_unit = n_unit * 0.0
        h = tp.concat([t.const(p), t.const(v), n_unit, z], axis=1)
        for k in range(cfg.color_depth):
            h = tp.relu(tp.matmul(h, self.vars[f"col_w{k}"]) + self.vars[f"col_b{k}"])
        out = tp.matmul(h, self.vars["col_out_w"]) + self.vars["col_out_b"]
        return tp.sigmoid(out)


# ---------------------------------------------------------------------------
# plain evaluation wrappers
# ---------------------------------------------------------------------------

def field_eval(params: FieldParams, p, bound: float = 0.0, check: bool = True):
    """(f, s, z) arrays at points p; s = bound + softplus(raw) >= bound."""
    if check:
        params.check_finite()
    t = tp.Tape()
    ctx = TapeField(t, params).geometry(np.atleast_2d(p), bound)
    return ctx["f"].value, ctx["s"].value, ctx["z"].value


def field_grad_analytic(params: FieldParams, p, check: bool = True) -> np.ndarray:
    """Exact spatial gradient of f at points p, shape (N,3)."""
    if check:
        params.check_finite()
    t = tp.Tape()
    tf = TapeField(t, params)
    ctx = tf.geometry(np.atleast_2d(p), bound=0.0, with_tangents=True)
    g = tf.gradient(ctx)
    return np.stack([gi.value for gi in g], axis=1)


def field_eval_with_grad(params: FieldParams, p, bound: float = 0.0,
                         check: bool = True):
    """(f, s, z, grad) arrays at points p from a single field pass.

    Matches ``field_eval`` + ``field_grad_analytic`` but shares the encode
    and the geometry MLP between the value and its spatial gradient.
    """
    if check:
        params.check_finite()
    t = tp.Tape()
    tf = TapeField(t, params)
    ctx = tf.geometry(np.atleast_2d(p), bound, with_tangents=True)
    g = tf.gradient(ctx)
    grad = np.stack([gi.value for gi in g], axis=1)
    return ctx["f"].value, ctx["s"].value, ctx["z"].value, grad


@dataclass
class GradEstimate:
    g: np.ndarray      # (N,3) estimated gradient
    step: np.ndarray   # (N,) the shared eps per point, in (0, eps_max]


def field_grad_stochastic(params, p, eps_max: float,
                          rng: np.random.Generator | None = None,
                          eps=None) -> GradEstimate:
    """Central-difference gradient with one random step per point.

    eps ~ U(0, eps_max] is drawn once per point and shared by all three
    axes; each component is (f(p + eps e_a) - f(p - eps e_a)) / (2 eps).
    ``params`` may also be a plain callable p -> f for probe functions, and
    ``eps`` may be forced to a given array instead of drawn.
    """
    if eps_max <= 0:
        raise ValueError("eps_max must be > 0")
    p = np.atleast_2d(p)
    n = p.shape[0]
    if eps is None:
        eps = eps_max * (1.0 - rng.uniform(size=n))     # (0, eps_max]
    else:
        eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,))
    probes = _stochastic_probe_points(p, eps).reshape(-1, 3)
    if callable(params):
        f = np.asarray(params(probes), dtype=np.float64)
    else:
        f, _, _ = field_eval(params, probes, check=False)
    f = f.reshape(6, n)
    g = np.stack([(f[2 * a] - f[2 * a + 1]) / (2.0 * eps) for a in range(3)], axis=1)
    return GradEstimate(g=g, step=eps)


def _stochastic_probe_points(p: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """(6,N,3) probe positions: +-eps along each axis."""
    n = p.shape[0]
    probes = np.empty((6, n, 3))
    for a in range(3):
        d = np.zeros((n, 3))
        d[:, a] = eps
        probes[2 * a] = p + d
        probes[2 * a + 1] = p - d
    return probes


def color_eval(params: FieldParams, p, view_dir, normal, z,
               check: bool = True) -> np.ndarray:
    """RGB colors in [0,1]^3 at points p (plain arrays in and out)."""
    if check:
        params.check_finite()
    t = tp.Tape()
    tf = TapeField(t, params)
    zv = t.const(np.atleast_2d(z))
    return tf.color(np.atleast_2d(p), view_dir, np.atleast_2d(normal), zv).value


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class FormatError(Exception):
    """Checkpoint file is not a valid NRCK stream."""


class IoError(Exception):
    """Underlying file could not be read or written."""


def _config_vector(cfg: FieldConfig) -> np.ndarray:
    return np.array([cfg.n_levels, cfg.r_min, cfg.r_max, cfg.channels,
                     cfg.geo_width, cfg.geo_depth, cfg.feat_dim,
                     cfg.color_width, cfg.color_depth,
                     1.0 if cfg.condition_on_normal else 0.0], dtype=np.float64)


def _config_from_vector(v: np.ndarray) -> FieldConfig:
    return FieldConfig(n_levels=int(v[0]), r_min=int(v[1]), r_max=int(v[2]),
                       channels=int(v[3]), geo_width=int(v[4]),
                       geo_depth=int(v[5]), feat_dim=int(v[6]),
                       color_width=int(v[7]), color_depth=int(v[8]),
                       condition_on_normal=bool(v[9] != 0.0))


def write_checkpoint(params: FieldParams, path: str):
    items = [("_config", _config_vector(params.cfg))]
    items += sorted(params.tensors.items())
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(items)))
            for name, arr in items:
                arr = np.asarray(arr, dtype=np.float64)
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f8").tobytes(order="C"))
    except OSError as e:
        raise IoError(str(e)) from e


def read_checkpoint(path: str) -> FieldParams:
    try:
        with open(path, "rb") as fh:
            buf = memoryview(fh.read())
    except OSError as e:
        raise IoError(str(e)) from e

    def take(pos, n):
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint")
        return buf[pos:pos + n], pos + n

    raw, pos = take(0, 4)
    if bytes(raw) != CKPT_MAGIC:
        raise FormatError("bad magic")
    raw, pos = take(pos, 8)
    version, count = struct.unpack("<II", raw)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}")
    tensors = {}
    for _ in range(count):
        raw, pos = take(pos, 4)
        (nlen,) = struct.unpack("<I", raw)
        raw, pos = take(pos, nlen)
        name = bytes(raw).decode("utf-8")
        raw, pos = take(pos, 4)
        (ndim,) = struct.unpack("<I", raw)
        raw, pos = take(pos, 4 * ndim)
        dims = struct.unpack(f"<{ndim}I", raw)
        size = int(np.prod(dims)) if ndim else 1
        raw, pos = take(pos, 8 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    if pos != len(buf):
        raise FormatError("trailing bytes")
    if "_config" not in tensors:
        raise FormatError("missing _config record")
    cfg = _config_from_vector(tensors.pop("_config"))
    return FieldParams(cfg, tensors)
