"""Synthetic posed-RGB datasets: camera placement, ray generation, binary I/O.

Cameras sit on a Fibonacci sphere around the scene centroid (deterministic
per seed, with a small seeded jitter) and use the OpenCV pinhole convention:
camera x right, y down, z forward; pixel (row j, col i) maps to the camera
direction (((i+0.5)-cx)/fx, ((j+0.5)-cy)/fy, 1).

Images store the exact sphere-traced scene color; depth maps ride along for
diagnostics only and are never fed to training.

File format ("NRDS"): magic, u32 version=1, u32 n_views, then per view a
16xf64 row-major camera-to-world matrix, 4xf64 intrinsics (fx fy cx cy),
u32 width, u32 height, width*height*3 f32 RGB, width*height f32 depth.
Everything little-endian; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .scenes import AnalyticScene, DegenerateScene, ray_aabb, sphere_trace

MAGIC = b"NRDS"
VERSION = 1

# rays are clipped to this cube (the field's domain plus a small margin)
DOMAIN_LO = np.array([-1.05, -1.05, -1.05])
DOMAIN_HI = np.array([1.05, 1.05, 1.05])


class FormatError(Exception):
    """Dataset file is not a valid NRDS stream."""


class IoError(Exception):
    """Underlying file could not be read or written."""


@dataclass(frozen=True)
class Camera:
    c2w: np.ndarray          # (4,4) camera-to-world, row-major
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        m = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "c2w", m)

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]


@dataclass
class SyntheticDataset:
    cameras: list
    images: list          # per camera (h, w, 3) float32 in [0,1]
    depths: list          # per camera (h, w) float32, 0 where no surface

    def __post_init__(self):
        if len(self.cameras) != len(self.images) or len(self.cameras) != len(self.depths):
            raise ValueError("cameras, images, depths must align")

    def n_views(self) -> int:
        return len(self.cameras)


# ---------------------------------------------------------------------------
# camera placement and rays
# ---------------------------------------------------------------------------

def look_at(eye: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world matrix with +z looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye coincides with target")
    fwd = fwd / n
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = fwd
    m[:3, 3] = eye
    return m


def fibonacci_cameras(scene: AnalyticScene, n_views: int, radius: float,
                      resolution: int, seed: int, fov_deg: float = 45.0,
                      jitter: float = 0.02) -> list:
    """Evenly spread cameras on a sphere around the scene centroid."""
    rng = np.random.default_rng(seed)
    target = scene.centroid()
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    i = np.arange(n_views)
    z = 1.0 - (2.0 * i + 1.0) / n_views
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    az = 2.0 * np.pi * i / golden
    dirs = np.stack([r * np.cos(az), r * np.sin(az), z], axis=1)
    dirs = dirs + jitter * rng.normal(size=dirs.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    f = (resolution / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
    c = resolution / 2.0
    cams = []
    for k in range(n_views):
        eye = target + radius * dirs[k]
        cams.append(Camera(look_at(eye, target), fx=f, fy=f, cx=c, cy=c,
                           width=resolution, height=resolution))
    return cams


def camera_rays(cam: Camera):
    """All pixel rays of a camera, row-major.

    Returns (origins (n,3), dirs (n,3) unit, t_near (n,), t_far (n,)) with
    the t-range clipped to the rendering domain cube; rays that miss the
    cube get t_near == t_far == 0.
    """
    j, i = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    x = (i.ravel() + 0.5 - cam.cx) / cam.fx
    y = (j.ravel() + 0.5 - cam.cy) / cam.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    d_world = d_cam @ cam.c2w[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    o = np.broadcast_to(cam.origin, d_world.shape).copy()
    tmin, tmax = ray_aabb(o, d_world, DOMAIN_LO, DOMAIN_HI)
    t_near = np.maximum(tmin, 1e-4)
    t_far = tmax
    bad = t_far <= t_near
    t_near = np.where(bad, 0.0, t_near)
    t_far = np.where(bad, 0.0, t_far)
    return o, d_world, t_near, t_far


def generate_dataset(scene: AnalyticScene, n_views: int, radius: float,
                     resolution: int, seed: int, fov_deg: float = 45.0,
                     jitter: float = 0.02) -> SyntheticDataset:
    """Sphere-trace every pixel of every camera into an exact dataset."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if len(scene.primitives) == 0:
        raise DegenerateScene("no primitives")
    cams = fibonacci_cameras(scene, n_views, radius, resolution, seed,
                             fov_deg=fov_deg, jitter=jitter)
    images, depths = [], []
    for cam in cams:
        o, d, t0, t1 = camera_rays(cam)
        live = t1 > t0
        color = np.broadcast_to(scene.background, o.shape).copy()
        depth = np.zeros(o.shape[0])
        if np.any(live):
            res = sphere_trace(scene, o[live], d[live], t0[live], t1[live])
            color[live] = res["color"]
            depth[live] = res["t"]
        images.append(np.clip(color, 0.0, 1.0).astype(np.float32)
                      .reshape(cam.height, cam.width, 3))
        depths.append(depth.astype(np.float32).reshape(cam.height, cam.width))
    return SyntheticDataset(cams, images, depths)


def dataset_rays(ds: SyntheticDataset):
    """Flatten every view into one ray pool for training.

    Returns dict of arrays: origins, dirs, t_near, t_far, rgb (float64 in
    [0,1]), depth (diagnostic).  Order is view-major then row-major, so the
    pool is deterministic for a given dataset.
    """
    os_, ds_, tn, tf, rgb, dep = [], [], [], [], [], []
    for cam, img, d in zip(ds.cameras, ds.images, ds.depths):
        o, dd, t0, t1 = camera_rays(cam)
        os_.append(o)
        ds_.append(dd)
        tn.append(t0)
        tf.append(t1)
        rgb.append(img.reshape(-1, 3).astype(np.float64))
        dep.append(d.reshape(-1).astype(np.float64))
    return {
        "origins": np.concatenate(os_), "dirs": np.concatenate(ds_),
        "t_near": np.concatenate(tn), "t_far": np.concatenate(tf),
        "rgb": np.concatenate(rgb), "depth": np.concatenate(dep),
    }


# ---------------------------------------------------------------------------
# binary round-trip
# ---------------------------------------------------------------------------

def write_dataset(ds: SyntheticDataset, path: str):
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<II", VERSION, ds.n_views()))
            for cam, img, dep in zip(ds.cameras, ds.images, ds.depths):
                fh.write(cam.c2w.astype("<f8").tobytes(order="C"))
                fh.write(struct.pack("<4d", cam.fx, cam.fy, cam.cx, cam.cy))
                fh.write(struct.pack("<II", cam.width, cam.height))
                fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(dep, dtype="<f4").tobytes())
    except OSError as e:
        raise IoError(str(e)) from e


def _take(buf: memoryview, pos: int, n: int):
    if pos + n > len(buf):
        raise FormatError("truncated dataset file")
    return buf[pos:pos + n], pos + n


def read_dataset(path: str) -> SyntheticDataset:
    try:
        with open(path, "rb") as fh:
            buf = memoryview(fh.read())
    except OSError as e:
        raise IoError(str(e)) from e
    raw, pos = _take(buf, 0, 4)
    if bytes(raw) != MAGIC:
        raise FormatError("bad magic")
    raw, pos = _take(buf, pos, 8)
    version, n_views = struct.unpack("<II", raw)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    cams, images, depths = [], [], []
    for _ in range(n_views):
        raw, pos = _take(buf, pos, 16 * 8)
        c2w = np.frombuffer(raw, dtype="<f8").reshape(4, 4).copy()
        raw, pos = _take(buf, pos, 4 * 8)
        fx, fy, cx, cy = struct.unpack("<4d", raw)
        raw, pos = _take(buf, pos, 8)
        w, h = struct.unpack("<II", raw)
        raw, pos = _take(buf, pos, w * h * 3 * 4)
        img = np.frombuffer(raw, dtype="<f4").reshape(h, w, 3).copy()
        raw, pos = _take(buf, pos, w * h * 4)
        dep = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
        cams.append(Camera(c2w, fx, fy, cx, cy, w, h))
        images.append(img)
        depths.append(dep)
    if pos != len(buf):
        raise FormatError("trailing bytes after last view")
    return SyntheticDataset(cams, images, depths)
