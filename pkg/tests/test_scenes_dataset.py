"""Scene-oracle and dataset tests.

Verifies: exact SDF values for primitives, min-union lower-bound property,
sphere-trace hit accuracy on 10k random rays, closed-form intersection cases,
Fibonacci camera determinism, dataset pixel statistics, and the bit-exact
binary round-trip including its failure modes.
"""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrd import dataset as dst
from nrd import scenes as sc


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestSdf:
    def test_unit_sphere_values(self):
        scene = sc.AnalyticScene((sc.Sphere([0, 0, 0], 1.0),))
        npt.assert_allclose(sc.scene_sdf(scene, [[0, 0, 0]]), [-1.0])
        npt.assert_allclose(sc.scene_sdf(scene, [[2, 0, 0]]), [1.0])

    def test_plane_distance_along_normal(self):
        scene = sc.AnalyticScene((sc.Plane([0, 0, 1], 0.0),))
        npt.assert_allclose(sc.scene_sdf(scene, [[5, -3, 0.25]]), [0.25])

    def test_box_sdf_against_sampled_surface(self):
        box = sc.Box([0.1, -0.2, 0.0], [0.3, 0.4, 0.2])
        rng = np.random.default_rng(0)
        # dense points on the box surface
        face = rng.integers(0, 6, size=20000)
        uv = rng.uniform(-1, 1, size=(20000, 2))
        pts = np.zeros((20000, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        others = np.array([[1, 2], [0, 2], [0, 1]])
        half = np.array([0.3, 0.4, 0.2])
        for a in range(3):
            m = axis == a
            pts[m, a] = sign[m] * half[a]
            pts[m, others[a][0]] = uv[m, 0] * half[others[a][0]]
            pts[m, others[a][1]] = uv[m, 1] * half[others[a][1]]
        pts += np.array([0.1, -0.2, 0.0])
        q = rng.uniform(-0.8, 0.8, size=(200, 3))
        sdf = sc.prim_sdf(box, q)
        brute = np.min(np.linalg.norm(q[:, None, :] - pts[None, :, :], axis=2), axis=1)
        # sampled surface can only overestimate the true distance
        assert np.all(np.abs(sdf) <= brute + 1e-9)
        npt.assert_allclose(np.abs(sdf), brute, atol=5e-3)

    def test_box_normals_unit_and_outward(self):
        box = sc.Box([0, 0, 0], [0.3, 0.3, 0.3])
        rng = np.random.default_rng(1)
        p = rng.uniform(-0.8, 0.8, size=(500, 3))
        n = sc.prim_normal(box, p)
        npt.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
        # stepping along the normal must increase the SDF
        s0 = sc.prim_sdf(box, p)
        s1 = sc.prim_sdf(box, p + 1e-5 * n)
        assert np.all(s1 > s0)

    def test_min_union_lower_bound(self):
        scene = sc.room_slice_scene()
        rng = np.random.default_rng(2)
        p = rng.uniform(-1, 1, size=(300, 3))
        u = sc.scene_sdf(scene, p)
        for pr in scene.primitives:
            assert np.all(u <= sc.prim_sdf(pr, p) + 1e-12)

    def test_scene_validation(self):
        with pytest.raises(ValueError):
            sc.AnalyticScene(())
        with pytest.raises(ValueError):
            sc.Sphere([0, 0, 0], -1.0)
        with pytest.raises(ValueError):
            sc.Plane([0, 0, 2.0], 0.0)
        with pytest.raises(ValueError):
            sc.AnalyticScene((sc.Sphere([0, 0, 0], 1.0),), background=[2, 0, 0])


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-2, 2), y=st.floats(-2, 2), z=st.floats(-2, 2),
       r=st.floats(0.1, 1.5))
def test_property_sphere_sdf_exact(x, y, z, r):
    s = sc.Sphere([0.2, -0.1, 0.3], r)
    p = np.array([[x, y, z]])
    d = np.linalg.norm(p[0] - s.center) - r
    npt.assert_allclose(sc.prim_sdf(s, p)[0], d, rtol=1e-12, atol=1e-12)


class TestSphereTrace:
    def test_head_on_sphere(self):
        scene = sc.AnalyticScene((sc.Sphere([0, 0, 0], 1.0),))
        res = sc.sphere_trace(scene, [[0, 0, 3]], [[0, 0, -1]], 0.0, 10.0)
        assert res["hit"][0]
        npt.assert_allclose(res["t"][0], 2.0, atol=1e-5)
        npt.assert_allclose(res["normal"][0], [0, 0, 1], atol=1e-5)

    def test_pointing_away_misses(self):
        scene = sc.AnalyticScene((sc.Sphere([0, 0, 0], 1.0),))
        res = sc.sphere_trace(scene, [[0, 0, 3]], [[0, 0, 1]], 0.0, 10.0)
        assert not res["hit"][0]
        npt.assert_allclose(res["color"][0], scene.background)
        assert res["t"][0] == 0.0

    def test_plane_45_degrees(self):
        scene = sc.AnalyticScene((sc.Plane([0, 0, 1], 0.0),))
        d = unit([0, np.sqrt(0.5), -np.sqrt(0.5)])
        res = sc.sphere_trace(scene, [[0, 0, 1]], [d], 0.0, 10.0)
        assert res["hit"][0]
        npt.assert_allclose(res["t"][0], np.sqrt(2.0), atol=1e-5)

    def test_hits_satisfy_sdf_tolerance_10k(self):
        scene = sc.room_slice_scene()
        rng = np.random.default_rng(3)
        o = rng.uniform(-0.15, 0.15, size=(10000, 3)) * np.array([1, 1, 0.5])
        d = rng.normal(size=(10000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        eps = 1e-6
        res = sc.sphere_trace(scene, o, d, 0.0, 6.0, eps=eps, max_steps=512)
        hit = res["hit"]
        assert hit.sum() > 1000
        s = np.abs(sc.scene_sdf(scene, res["point"][hit]))
        assert np.all(s < eps)


class TestCamerasAndDataset:
    def test_look_at_axes(self):
        m = dst.look_at(np.array([0, 0, 2.0]), np.array([0, 0, 0.0]))
        npt.assert_allclose(m[:3, 2], [0, 0, -1], atol=1e-12)   # forward
        npt.assert_allclose(np.linalg.det(m[:3, :3]), 1.0, atol=1e-12)

    def test_camera_rays_unit_and_clipped(self):
        scene = sc.sphere_checker_scene()
        cam = dst.fibonacci_cameras(scene, 4, 1.8, 32, seed=0)[0]
        o, d, t0, t1 = dst.camera_rays(cam)
        npt.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
        live = t1 > t0
        assert np.all(t0[live] >= 0)
        p_in = o[live] + (t0[live] + 1e-9)[:, None] * d[live]
        assert np.all(np.abs(p_in) <= 1.05 + 1e-6)

    def test_generate_deterministic(self):
        scene = sc.sphere_checker_scene()
        d1 = dst.generate_dataset(scene, 2, 1.8, 16, seed=7)
        d2 = dst.generate_dataset(scene, 2, 1.8, 16, seed=7)
        for a, b in zip(d1.images, d2.images):
            assert np.array_equal(a, b)
        for a, b in zip(d1.cameras, d2.cameras):
            assert np.array_equal(a.c2w, b.c2w)

    def test_center_pixel_hits_sphere(self):
        scene = sc.sphere_checker_scene()
        ds = dst.generate_dataset(scene, 4, 1.8, 32, seed=1)
        for dep in ds.depths:
            assert dep[16, 16] > 0

    def test_sphere_dataset_statistics(self):
        scene = sc.sphere_checker_scene()
        ds = dst.generate_dataset(scene, 16, 1.8, 64, seed=0)
        frac = []
        for img in ds.images:
            assert img.min() >= 0.0 and img.max() <= 1.0
            nonbg = np.any(np.abs(img - scene.background) > 1 / 255, axis=2)
            frac.append(nonbg.mean())
        assert np.mean(frac) >= 0.30

    def test_validation(self):
        scene = sc.sphere_checker_scene()
        with pytest.raises(ValueError):
            dst.generate_dataset(scene, 1, 1.8, 16, seed=0)
        with pytest.raises(ValueError):
            dst.generate_dataset(scene, 2, 1.8, 4, seed=0)

    def test_dataset_rays_pool_shape(self):
        scene = sc.sphere_checker_scene()
        ds = dst.generate_dataset(scene, 2, 1.8, 16, seed=0)
        pool = dst.dataset_rays(ds)
        assert pool["origins"].shape == (2 * 16 * 16, 3)
        assert pool["rgb"].min() >= 0 and pool["rgb"].max() <= 1


class TestRoundTrip:
    def _tiny(self):
        scene = sc.sphere_checker_scene()
        return dst.generate_dataset(scene, 2, 1.8, 16, seed=5)

    def test_bit_exact(self, tmp_path):
        ds = self._tiny()
        p = tmp_path / "d.nrds"
        dst.write_dataset(ds, str(p))
        back = dst.read_dataset(str(p))
        assert back.n_views() == ds.n_views()
        for a, b in zip(ds.images, back.images):
            assert np.array_equal(a, b) and a.dtype == b.dtype
        for a, b in zip(ds.depths, back.depths):
            assert np.array_equal(a, b)
        for a, b in zip(ds.cameras, back.cameras):
            assert np.array_equal(a.c2w, b.c2w)
            assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == \
                   (b.fx, b.fy, b.cx, b.cy, b.width, b.height)

    def test_truncated(self, tmp_path):
        ds = self._tiny()
        p = tmp_path / "d.nrds"
        dst.write_dataset(ds, str(p))
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(dst.FormatError):
            dst.read_dataset(str(p))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.nrds"
        p.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(dst.FormatError):
            dst.read_dataset(str(p))

    def test_missing_file(self, tmp_path):
        with pytest.raises(dst.IoError):
            dst.read_dataset(str(tmp_path / "nope.nrds"))
