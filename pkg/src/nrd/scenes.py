"""Analytic SDF scenes and exact ground-truth rendering by sphere tracing.

Scenes are min-unions of spheres, planes, and axis-aligned boxes with checker
or constant textures.  Min-union of *non-overlapping* primitives is an exact
SDF, which keeps every ground-truth quantity (distance, normal, hit point)
closed-form; fixture scenes are built non-overlapping wherever exactness
matters.  All functions are vectorized over points / rays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DegenerateScene(Exception):
    """Scene has no usable bounding content for camera placement."""


def _vec3(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite vector")
    return a


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "color", _vec3(self.color))


@dataclass(frozen=True)
class Checker:
    """3-D checkerboard: cell parity of floor(p * scale) picks color_a/b."""
    scale: float
    color_a: np.ndarray
    color_b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "color_a", _vec3(self.color_a))
        object.__setattr__(self, "color_b", _vec3(self.color_b))


def texture_color(tex, p: np.ndarray) -> np.ndarray:
    """Color of texture ``tex`` at points ``p`` (N,3) -> (N,3)."""
    p = np.atleast_2d(p)
    if isinstance(tex, Constant):
        return np.broadcast_to(tex.color, (p.shape[0], 3)).copy()
    parity = np.floor(p * tex.scale).sum(axis=1).astype(np.int64) & 1
    return np.where(parity[:, None] == 0, tex.color_a, tex.color_b)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    texture: object = field(default_factory=lambda: Constant([0.8, 0.8, 0.8]))

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        if not self.radius > 0:
            raise ValueError("sphere radius must be > 0")


@dataclass(frozen=True)
class Plane:
    """Half-space boundary n.p = offset, signed distance positive along n."""
    normal: np.ndarray
    offset: float
    texture: object = field(default_factory=lambda: Constant([0.8, 0.8, 0.8]))

    def __post_init__(self):
        n = _vec3(self.normal)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half: np.ndarray
    texture: object = field(default_factory=lambda: Constant([0.8, 0.8, 0.8]))

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        object.__setattr__(self, "half", _vec3(self.half))
        if not np.all(self.half > 0):
            raise ValueError("box half-extents must be > 0")


def prim_sdf(prim, p: np.ndarray) -> np.ndarray:
    """Signed distance of primitive at points (N,3) -> (N,)."""
    p = np.atleast_2d(p)
    if isinstance(prim, Sphere):
        return np.linalg.norm(p - prim.center, axis=1) - prim.radius
    if isinstance(prim, Plane):
        return p @ prim.normal - prim.offset
    if isinstance(prim, Box):
        q = np.abs(p - prim.center) - prim.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    raise TypeError(f"unknown primitive {type(prim).__name__}")


def prim_normal(prim, p: np.ndarray) -> np.ndarray:
    """Unit outward gradient of the primitive SDF at points (N,3) -> (N,3)."""
    p = np.atleast_2d(p)
    if isinstance(prim, Sphere):
        d = p - prim.center
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.maximum(n, 1e-300)
    if isinstance(prim, Plane):
        return np.broadcast_to(prim.normal, p.shape).copy()
    if isinstance(prim, Box):
        d = p - prim.center
        q = np.abs(d) - prim.half
        qpos = np.maximum(q, 0.0)
        norm = np.linalg.norm(qpos, axis=1, keepdims=True)
        g_out = np.sign(d) * qpos / np.maximum(norm, 1e-300)
        # inside: push along the axis closest to a face
        onehot = np.zeros_like(q)
        onehot[np.arange(len(q)), q.argmax(axis=1)] = 1.0
        g_in = np.sign(d) * onehot
        g_in[np.sign(d[np.arange(len(q)), q.argmax(axis=1)]) == 0] = np.array([1.0, 0, 0])
        outside = (q > 0).any(axis=1)
        return np.where(outside[:, None], g_out, g_in)
    raise TypeError(f"unknown primitive {type(prim).__name__}")


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalyticScene:
    """Min-union of primitives plus a background color."""
    primitives: tuple
    background: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))

    def __post_init__(self):
        if len(self.primitives) == 0:
            raise ValueError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", tuple(self.primitives))
        bg = _vec3(self.background)
        if np.any(bg < 0) or np.any(bg > 1):
            raise ValueError("background color must lie in [0,1]")
        object.__setattr__(self, "background", bg)

    def centroid(self) -> np.ndarray:
        pts = []
        for pr in self.primitives:
            if isinstance(pr, Plane):
                pts.append(pr.normal * pr.offset)
            else:
                pts.append(pr.center)
        return np.mean(pts, axis=0)


def scene_sdf(scene: AnalyticScene, p: np.ndarray) -> np.ndarray:
    """Min-union signed distance at points (N,3) -> (N,)."""
    p = np.atleast_2d(p)
    d = np.stack([prim_sdf(pr, p) for pr in scene.primitives], axis=0)
    return d.min(axis=0)


def scene_sdf_argmin(scene: AnalyticScene, p: np.ndarray):
    p = np.atleast_2d(p)
    d = np.stack([prim_sdf(pr, p) for pr in scene.primitives], axis=0)
    k = d.argmin(axis=0)
    return d[k, np.arange(p.shape[0])], k


def scene_normal_color(scene: AnalyticScene, p: np.ndarray):
    """Normal and texture color of the nearest primitive at each point."""
    p = np.atleast_2d(p)
    _, k = scene_sdf_argmin(scene, p)
    normal = np.zeros_like(p)
    color = np.zeros_like(p)
    for j, pr in enumerate(scene.primitives):
        m = k == j
        if np.any(m):
            normal[m] = prim_normal(pr, p[m])
            color[m] = texture_color(pr.texture, p[m])
    return normal, color


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = _vec3(self.origin)
        d = _vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction


def ray_aabb(o: np.ndarray, d: np.ndarray, lo, hi):
    """Entry/exit distances of rays (N,3) against an axis-aligned box.

    Returns (tmin, tmax); a ray misses the box when tmax <= max(tmin, 0).
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    # parallel rays: +-inf propagates correctly through min/max except 0*inf
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    return tmin, tmax


def sphere_trace(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray,
                 t_near, t_far, eps: float = 1e-6, max_steps: int = 256):
    """March rays to the min-union surface.

    Returns a dict of arrays over N rays: ``hit`` bool, ``t`` (0 where miss),
    ``point``, ``normal``, ``color`` (background where miss).  Rays that use
    up ``max_steps`` without converging count as misses.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    origins = np.atleast_2d(origins).astype(np.float64)
    dirs = np.atleast_2d(dirs).astype(np.float64)
    n = origins.shape[0]
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n,)).copy()
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n,))

    t = t_near.copy()
    active = t < t_far
    hit = np.zeros(n, dtype=bool)
    for _ in range(max_steps):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        p = origins[idx] + t[idx, None] * dirs[idx]
        s = scene_sdf(scene, p)
        newly = np.abs(s) < eps
        hit[idx[newly]] = True
        active[idx[newly]] = False
        adv = idx[~newly]
        t[adv] += s[~newly]
        over = t[adv] > t_far[adv]
        active[adv[over]] = False

    point = origins + t[:, None] * dirs
    normal = np.zeros((n, 3))
    color = np.broadcast_to(scene.background, (n, 3)).copy()
    if np.any(hit):
        nrm, col = scene_normal_color(scene, point[hit])
        normal[hit] = nrm
        color[hit] = col
    t_out = np.where(hit, t, 0.0)
    return {"hit": hit, "t": t_out, "point": point, "normal": normal, "color": color}


# ---------------------------------------------------------------------------
# fixture scenes
# ---------------------------------------------------------------------------

def sphere_checker_scene(radius: float = 0.5) -> AnalyticScene:
    """Checkered sphere at the origin on a white background."""
    tex = Checker(scale=4.0, color_a=[0.9, 0.25, 0.2], color_b=[0.15, 0.3, 0.85])
    return AnalyticScene(primitives=(Sphere([0.0, 0.0, 0.0], radius, tex),),
                         background=np.array([1.0, 1.0, 1.0]))


def room_slice_scene(gap: float = 0.2, thickness: float = 0.2,
                     span: float = 0.95) -> AnalyticScene:
    """Two parallel slabs (floor and ceiling) seen from inside.

    The ceiling's lower face sits at z=+gap and the floor's upper face at
    z=-gap, so interior cameras view both at grazing angles.
    """
    ztex = Checker(scale=3.0, color_a=[0.85, 0.75, 0.25], color_b=[0.2, 0.2, 0.25])
    btex = Checker(scale=3.0, color_a=[0.3, 0.7, 0.4], color_b=[0.9, 0.9, 0.9])
    half = np.array([span, span, thickness / 2])
    zc = gap + thickness / 2
    return AnalyticScene(
        primitives=(Box([0.0, 0.0, +zc], half, ztex),
                    Box([0.0, 0.0, -zc], half, btex)),
        background=np.array([0.05, 0.05, 0.08]))


def plane_bump_scene(bump_radius: float = 0.12, sink: float = 0.04) -> AnalyticScene:
    """Horizontal plane with a small spherical bump poking through it.

    The bump's lateral footprint is sqrt(r^2 - sink^2), kept below the
    coarsest feature-grid cell so it reads as a fine-scale feature.
    """
    tex = Constant([0.7, 0.7, 0.7])
    return AnalyticScene(
        primitives=(Plane([0.0, 0.0, 1.0], 0.0, tex),
                    Sphere([0.0, 0.0, -sink], bump_radius, tex)),
        background=np.array([1.0, 1.0, 1.0]))
