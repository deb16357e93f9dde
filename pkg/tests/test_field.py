"""Field tests.

Verifies: trilinear interpolation identities (vertex/cell-center), the
degenerate affine case f = bias + offset, geometric initialization sign
agreement, analytic gradients against finite differences and the sphere
oracle, the stochastic estimator's exactness on affine/quadratic probes and
its pinned cubic value, scale-head lower-bound clamping, color range and
normal-conditioning semantics, and bit-exact checkpoint round-trips.
"""

import numpy as np
import numpy.testing as npt
import pytest

from nrd import field as fd
from nrd import tape as tp

TINY_CFG = fd.FieldConfig(n_levels=2, r_min=3, r_max=6, channels=2,
                          geo_width=8, feat_dim=3, color_width=8)


def tiny_params(seed=0, randomize_heads=True):
    params = fd.init_field_params(TINY_CFG, seed=seed)
    if randomize_heads:
        rng = np.random.default_rng(seed + 1)
        params.tensors["geo_out_w"] = rng.normal(0, 0.3, params.tensors["geo_out_w"].shape)
        params.tensors["geo_out_b"] = rng.normal(0, 0.1, params.tensors["geo_out_b"].shape)
        params.tensors["scale_w"] = rng.normal(0, 0.3, params.tensors["scale_w"].shape)
        for k in range(TINY_CFG.n_levels):
            g = params.tensors[f"grid{k}"]
            params.tensors[f"grid{k}"] = rng.normal(0, 0.5, g.shape)
    return params


class TestEncoding:
    def test_vertex_identity(self):
        cfg = TINY_CFG
        params = tiny_params()
        # vertex (1,2,0) of level 0 (r=3): p = vertex/r*2 - 1
        r = cfg.level_resolutions()[0]
        vtx = np.array([1, 2, 0])
        p = vtx / r * 2.0 - 1.0
        enc = fd.encode_positions(cfg, p[None])[0]
        flat = (vtx[0] * (r + 1) + vtx[1]) * (r + 1) + vtx[2]
        # all weight on the stored vertex
        j = np.nonzero(enc["w"][0] > 1e-12)[0]
        assert len(j) == 1 and enc["idx"][0, j[0]] == flat
        npt.assert_allclose(enc["w"][0, j[0]], 1.0, rtol=1e-12)

    def test_cell_center_mean(self):
        cfg = TINY_CFG
        r = cfg.level_resolutions()[0]
        p = (np.array([0.5, 0.5, 0.5]) / r) * 2.0 - 1.0   # center of cell (0,0,0)
        enc = fd.encode_positions(cfg, p[None])[0]
        npt.assert_allclose(enc["w"][0], np.full(8, 0.125), rtol=1e-12)

    def test_weights_partition_unity(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(-1.2, 1.2, size=(200, 3))   # includes out-of-domain
        for lv in fd.encode_positions(TINY_CFG, p):
            npt.assert_allclose(lv["w"].sum(axis=1), 1.0, rtol=1e-12)
            # weight gradients sum to zero along each axis
            npt.assert_allclose(fd.level_dw(lv).sum(axis=2), 0.0, atol=1e-9)

    def test_out_of_domain_clamped_zero_grad(self):
        p = np.array([[1.5, 0.0, 0.0]])
        for lv in fd.encode_positions(TINY_CFG, p):
            npt.assert_allclose(fd.level_dw(lv)[0][0], 0.0, atol=0)


class TestFieldEval:
    def test_affine_degenerate(self):
        params = fd.init_field_params(TINY_CFG, seed=0)
        for k in range(TINY_CFG.n_levels):
            params.tensors[f"grid{k}"][:] = 0.0
        params.tensors["geo_out_b"][0] = 0.37
        fd.init_geometric(params, 0.5)
        params.tensors["geo_out_b"][0] = 0.37    # re-set after init zeroed it
        rng = np.random.default_rng(1)
        p = rng.uniform(-1, 1, size=(50, 3))
        f, _, _ = fd.field_eval(params, p)
        off, _ = fd.offset_and_grad(params, p)
        npt.assert_allclose(f, 0.37 + off, atol=1e-12)

    def test_geometric_init_signs(self):
        params = fd.init_field_params(fd.FieldConfig(), seed=0)
        fd.init_geometric(params, 0.5)
        f0, _, _ = fd.field_eval(params, np.zeros((1, 3)))
        assert f0[0] < 0
        f1, _, _ = fd.field_eval(params, np.array([[0.9, 0, 0]]))
        assert f1[0] > 0
        rng = np.random.default_rng(2)
        p = rng.uniform(-1, 1, size=(10000, 3))
        f, _, _ = fd.field_eval(params, p)
        gt = np.linalg.norm(p, axis=1) - 0.5
        keep = np.abs(gt) > 1e-3
        agree = np.mean(np.sign(f[keep]) == np.sign(gt[keep]))
        assert agree >= 0.99

    def test_init_radius_validation(self):
        params = fd.init_field_params(TINY_CFG)
        with pytest.raises(ValueError):
            fd.init_geometric(params, 1.5)

    def test_scale_lower_bound_sweep(self):
        params = tiny_params()
        for raw in (-1e6, -10.0, 0.0, 10.0, 50.0):
            params.tensors["scale_w"][:] = 0.0
            params.tensors["scale_b"][0] = raw
            _, s, _ = fd.field_eval(params, np.zeros((4, 3)), bound=100.0)
            assert np.all(s >= 100.0)

    def test_nonfinite_params_raise(self):
        params = tiny_params()
        params.tensors["geo_w0"][0, 0] = np.nan
        with pytest.raises(fd.NonFiniteParams):
            fd.field_eval(params, np.zeros((1, 3)))

    def test_z_feature_shape(self):
        params = tiny_params()
        _, _, z = fd.field_eval(params, np.zeros((5, 3)))
        assert z.shape == (5, TINY_CFG.feat_dim)


class TestAnalyticGradient:
    def test_constant_field_zero_gradient(self):
        params = fd.init_field_params(TINY_CFG, seed=0)
        for k in range(TINY_CFG.n_levels):
            params.tensors[f"grid{k}"][:] = 0.0
        g = fd.field_grad_analytic(params, np.array([[0.2, -0.1, 0.4]]))
        npt.assert_allclose(g, 0.0, atol=1e-15)

    def test_matches_finite_differences(self):
        params = tiny_params(seed=3)
        rng = np.random.default_rng(4)
        # stay away from cell faces of the finest level
        r = max(TINY_CFG.level_resolutions())
        p = (rng.integers(0, r, size=(50, 3)) + rng.uniform(0.3, 0.7, (50, 3))) \
            / r * 2.0 - 1.0
        g = fd.field_grad_analytic(params, p)
        h = 1e-6
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = h
            fp, _, _ = fd.field_eval(params, p + dp, check=False)
            fm, _, _ = fd.field_eval(params, p - dp, check=False)
            fdg = (fp - fm) / (2 * h)
            rel = np.abs(g[:, a] - fdg) / np.maximum(np.abs(fdg), 1e-3)
            assert rel.max() < 1e-5

    def test_sphere_gradient_direction(self):
        params = fd.init_field_params(fd.FieldConfig(), seed=0)
        fd.init_geometric(params, 0.5)
        rng = np.random.default_rng(5)
        d = rng.normal(size=(100, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        p = 0.7 * d
        g = fd.field_grad_analytic(params, p)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        cosine = np.sum(gn * d, axis=1)
        assert cosine.min() > 0.99

    def test_gradient_of_gradient_loss_wrt_params(self):
        """The tangent pass stays differentiable w.r.t. parameters."""
        params = tiny_params(seed=6)
        p = np.array([[0.21, -0.37, 0.11], [0.4, 0.1, -0.3]])

        names = sorted(k for k in params.tensors if k != "init_radius")

        def build(t, vs):
            pp = fd.FieldParams(TINY_CFG, dict(zip(names, [v.value for v in vs]),
                                               init_radius=np.zeros(1)))
            tf = fd.TapeField(t, pp)
            tf.vars = dict(zip(names, vs))
            ctx = tf.geometry(p, bound=0.0)
            g = tf.gradient(ctx)
            nrm = tp.sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2] + 1e-18)
            return tp.mean((nrm - 1.0) * (nrm - 1.0))

        rep = tp.gradcheck(build, [params.tensors[k] for k in names],
                           max_coords=120, seed=0)
        assert rep.max_rel_err < 1e-5


class TestStochasticGradient:
    def test_affine_exact(self):
        g = fd.field_grad_stochastic(lambda q: q[:, 0], np.zeros((3, 3)),
                                     eps_max=0.5, rng=np.random.default_rng(0))
        npt.assert_allclose(g.g, np.tile([1.0, 0, 0], (3, 1)), atol=1e-12)
        assert np.all(g.step > 0) and np.all(g.step <= 0.5)

    def test_quadratic_exact(self):
        probe = lambda q: q[:, 0] ** 2
        g = fd.field_grad_stochastic(probe, np.array([[1.0, 0, 0]]),
                                     eps_max=0.3, rng=np.random.default_rng(1))
        npt.assert_allclose(g.g[0, 0], 2.0, rtol=1e-12)

    def test_cubic_pinned_value(self):
        probe = lambda q: q[:, 0] ** 3
        g = fd.field_grad_stochastic(probe, np.array([[1.0, 0, 0]]),
                                     eps_max=1.0, eps=np.array([0.5]))
        npt.assert_allclose(g.g[0, 0], 3.25, rtol=1e-14)

    def test_converges_to_analytic(self):
        params = tiny_params(seed=7)
        rng = np.random.default_rng(8)
        r = max(TINY_CFG.level_resolutions())
        p = (rng.integers(0, r, size=(40, 3)) + rng.uniform(0.3, 0.7, (40, 3))) \
            / r * 2.0 - 1.0
        g_an = fd.field_grad_analytic(params, p)
        g_st = fd.field_grad_stochastic(params, p, eps_max=1e-6, rng=rng).g
        cos = np.sum(g_an * g_st, axis=1) / (
            np.linalg.norm(g_an, axis=1) * np.linalg.norm(g_st, axis=1))
        ang = np.degrees(np.arccos(np.clip(cos, -1, 1)))
        assert ang.mean() < 0.1

    def test_eps_validation(self):
        with pytest.raises(ValueError):
            fd.field_grad_stochastic(lambda q: q[:, 0], np.zeros((1, 3)),
                                     eps_max=0.0, rng=np.random.default_rng(0))


class TestColor:
    def test_range_and_determinism(self):
        params = tiny_params(seed=9)
        rng = np.random.default_rng(10)
        p = rng.uniform(-1, 1, (1000, 3))
        v = rng.normal(size=(1000, 3))
        n = rng.normal(size=(1000, 3))
        z = rng.normal(size=(1000, TINY_CFG.feat_dim))
        c1 = fd.color_eval(params, p, v, n, z)
        c2 = fd.color_eval(params, p, v, n, z)
        assert c1.shape == (1000, 3)
        assert np.all(c1 >= 0) and np.all(c1 <= 1)
        assert np.array_equal(c1, c2)

    def test_zero_normal_passthrough(self):
        params = tiny_params(seed=11)
        p = np.zeros((2, 3))
        v = np.tile([0, 0, 1.0], (2, 1))
        z = np.zeros((2, TINY_CFG.feat_dim))
        c = fd.color_eval(params, p, v, np.zeros((2, 3)), z)
        assert np.all(np.isfinite(c))

    def test_disabled_equals_zero_normal(self):
        params = tiny_params(seed=12)
        cfg_off = fd.FieldConfig(**{**TINY_CFG.__dict__, "condition_on_normal": False})
        params_off = fd.FieldParams(cfg_off, params.tensors)
        rng = np.random.default_rng(13)
        p = rng.uniform(-1, 1, (10, 3))
        v = rng.normal(size=(10, 3))
        z = rng.normal(size=(10, TINY_CFG.feat_dim))
        c_zero_n = fd.color_eval(params, p, v, np.zeros((10, 3)), z)
        c_off = fd.color_eval(params_off, p, v, rng.normal(size=(10, 3)), z)
        npt.assert_allclose(c_off, c_zero_n, atol=1e-15)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = tiny_params(seed=14)
        fd.init_geometric(params, 0.42)
        path = str(tmp_path / "f.nrck")
        fd.write_checkpoint(params, path)
        back = fd.read_checkpoint(path)
        assert back.cfg == params.cfg
        assert set(back.tensors) == set(params.tensors)
        for k in params.tensors:
            assert np.array_equal(back.tensors[k], params.tensors[k]), k

    def test_bad_magic_and_truncation(self, tmp_path):
        p = tmp_path / "x.nrck"
        p.write_bytes(b"ZZZZ" + b"\0" * 16)
        with pytest.raises(fd.FormatError):
            fd.read_checkpoint(str(p))
        params = tiny_params()
        good = tmp_path / "g.nrck"
        fd.write_checkpoint(params, str(good))
        raw = good.read_bytes()
        good.write_bytes(raw[:-9])
        with pytest.raises(fd.FormatError):
            fd.read_checkpoint(str(good))

    def test_missing_file(self, tmp_path):
        with pytest.raises(fd.IoError):
            fd.read_checkpoint(str(tmp_path / "none.nrck"))
