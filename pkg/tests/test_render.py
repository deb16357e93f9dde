"""Volume-renderer tests.

Oracles: a hand alpha-compositing example (two segments of optical depth
ln 2), the opaque/empty closed-form limits, the telescoping identity
sum(w) = 1 - T_end checked at 1e-12 over 10k random rays, and a field whose
geometric initialization makes it an exact sphere SDF so sphere_trace gives
ground-truth termination distances.
"""

import numpy as np
import numpy.testing as npt
import pytest

from nrd import render as rd
from nrd import tape as tp
from nrd.conversion import TUVRLocal, VolSDFGlobal, VolSDFLocal
from nrd.field import FieldConfig, TapeField, init_field_params, init_geometric
from nrd.scenes import Ray


def sphere_field(radius=0.5, seed=0):
    """Params whose SDF is exactly ||p|| - radius (zeroed heads + offset)."""
    cfg = FieldConfig(n_levels=2, r_min=4, r_max=8, geo_width=16,
                      feat_dim=3, color_width=16)
    params = init_field_params(cfg, seed=seed)
    for k in list(params.tensors):
        if k.startswith("grid"):
            params.tensors[k] = np.zeros_like(params.tensors[k])
    init_geometric(params, radius)
    return params


class TestComposite:
    def test_two_segment_hand_oracle(self):
        ln2 = np.log(2.0)
        res = rd.composite(t=[1.0, 2.0], delta=[1.0, 1.0], sigma=[ln2, ln2],
                           sample_colors=[[1, 0, 0], [0, 1, 0]],
                           background=[0, 0, 1])
        npt.assert_allclose(res.samples.alpha, [0.5, 0.5], rtol=1e-15)
        npt.assert_allclose(res.samples.T, [1.0, 0.5], rtol=1e-15)
        npt.assert_allclose(res.samples.w, [0.5, 0.25], rtol=1e-15)
        npt.assert_allclose(res.acc, 0.75, rtol=1e-15)
        npt.assert_allclose(res.color, [0.5, 0.25, 0.25], rtol=1e-14)
        npt.assert_allclose(res.rendered_distance, 1.0 / 0.75, rtol=1e-14)
        assert res.prob_distance == 1.0

    def test_opaque_limit(self):
        res = rd.composite(t=[0.7], delta=[1.0], sigma=[1e4],
                           sample_colors=[[0.2, 0.4, 0.6]], background=[1, 1, 1])
        npt.assert_allclose(res.samples.w, [1.0])
        npt.assert_allclose(res.color, [0.2, 0.4, 0.6])
        assert res.prob_distance == 0.7
        npt.assert_allclose(res.rendered_distance, 0.7)

    def test_empty_space(self):
        res = rd.composite(t=[1.0, 2.0, 3.0], delta=[1.0] * 3, sigma=[0.0] * 3,
                           sample_colors=np.ones((3, 3)), background=[0.3, 0.2, 0.1])
        assert res.acc == 0.0
        npt.assert_allclose(res.color, [0.3, 0.2, 0.1])
        assert res.rendered_distance == 0.0

    def test_argmax_tie_takes_first(self):
        # all-zero density ties every weight at 0; first index must win
        s = rd.RaySampleSet.from_density([1.0, 2.0, 3.0], [1.0] * 3, [0.0] * 3)
        assert s.w[0] == s.w[1] == s.w[2] == 0.0
        assert s.argmax_index == 0

    def test_length_mismatch(self):
        with pytest.raises(rd.LengthMismatch):
            rd.composite([1.0, 2.0], [1.0], [0.5, 0.5],
                         np.ones((2, 3)), [0, 0, 0])
        with pytest.raises(rd.LengthMismatch):
            rd.composite([1.0, 2.0], [1.0, 1.0], [0.5, 0.5],
                         np.ones((3, 3)), [0, 0, 0])

    def test_sample_set_invariants_random(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n = rng.integers(1, 40)
            t = np.sort(rng.uniform(0.1, 3.0, size=n))
            delta = rng.uniform(1e-4, 0.2, size=n)
            sigma = rng.lognormal(0.0, 3.0, size=n) * rng.integers(0, 2, size=n)
            s = rd.RaySampleSet.from_density(t, delta, sigma)
            assert s.T[0] == 1.0
            assert np.all(np.diff(s.T) <= 1e-15)
            assert np.all((s.alpha >= 0) & (s.alpha <= 1))
            npt.assert_array_equal(s.w, s.T * s.alpha)
            assert s.w.sum() <= 1.0 + 1e-9

    def test_weight_sum_matches_transmittance_10k_rays(self):
        rng = np.random.default_rng(11)
        m, n = 10000, 64
        sigma = rng.lognormal(1.0, 4.0, size=(m, n))
        sigma[rng.uniform(size=(m, n)) < 0.3] = 0.0
        sigma[:100] = 0.0            # fully transparent rays
        sigma[100:200] = 1e6         # fully saturated rays
        delta = rng.uniform(1e-4, 0.1, size=(m, n))
        parts = rd._composite_terms(np.cumsum(delta, axis=1), delta, sigma)
        raw = parts["w"].sum(axis=1)
        assert np.max(np.abs(raw - (1.0 - parts["T_end"]))) < 1e-12
        assert np.all(parts["acc"] <= 1.0)
        assert np.all(raw <= 1.0 + 1e-12)


class TestSampling:
    def test_n_fine_zero_is_exact_stratification(self):
        params = sphere_field()
        ray = Ray(origin=np.array([0.0, 0.0, 1.8]),
                  direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.75, t_far=2.85)
        t, delta = rd.sample_ray(ray, n_coarse=16, n_fine=0,
                                 rng=np.random.default_rng(5), params=params)
        assert t.shape == (16,)
        edges = np.linspace(0.75, 2.85, 17)
        assert np.all(t >= edges[:-1]) and np.all(t <= edges[1:])
        npt.assert_allclose(delta.sum(), 2.85 - 0.75, rtol=1e-12)
        assert np.all(delta > 0)

    def test_same_seed_identical(self):
        params = sphere_field()
        ray = Ray(origin=np.array([0.0, 0.0, 1.8]),
                  direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.75, t_far=2.85)
        t1, d1 = rd.sample_ray(ray, 16, 8, np.random.default_rng(9), params,
                               mode=VolSDFLocal(), scale_bound=100.0)
        t2, d2 = rd.sample_ray(ray, 16, 8, np.random.default_rng(9), params,
                               mode=VolSDFLocal(), scale_bound=100.0)
        npt.assert_array_equal(t1, t2)
        npt.assert_array_equal(d1, d2)
        assert t1.shape == (24,)
        assert np.all(np.diff(t1) > 0)
        assert t1[0] >= 0.75 and t1[-1] <= 2.85

    def test_zero_weights_fall_back_to_uniform(self):
        bins = np.array([[1.0, 1.3, 2.1, 3.0]])
        w = np.zeros((1, 3))
        u = np.array([[0.0, 0.25, 0.5, 0.9]])
        t = rd._invert_cdf(bins, w, u)
        npt.assert_allclose(t, 1.0 + u * 2.0, rtol=1e-12)

    def test_importance_concentrates_on_heavy_bin(self):
        bins = np.array([np.linspace(0.0, 1.0, 9)])
        w = np.zeros((1, 8))
        w[0, 5] = 1.0                      # all mass in [0.625, 0.75]
        u = np.random.default_rng(2).uniform(size=(1, 64))
        t = rd._invert_cdf(bins, w, u)
        assert np.all((t >= 0.625) & (t <= 0.75))

    def test_fine_samples_track_surface(self):
        # Exact sphere SDF at high sharpness: importance nodes should pile
        # up near the front intersection at t = 1.3.
        params = sphere_field()
        ray = Ray(origin=np.array([0.0, 0.0, 1.8]),
                  direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.75, t_far=2.85)
        t, _ = rd.sample_ray(ray, 32, 32, np.random.default_rng(4), params,
                             mode=VolSDFLocal(), scale_bound=3000.0)
        fine_near_surface = np.sum(np.abs(t - 1.3) < 0.05)
        assert fine_near_surface >= 24


class TestRenderBatch:
    def ray_setup(self):
        o = np.array([[0.0, 0.0, 1.8], [0.0, 0.9, 1.5]])
        d = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
        tn = np.array([0.75, 0.45])
        tf_ = np.array([2.85, 2.55])
        return o, d, tn, tf_

    def test_sphere_prob_distance_matches_trace_oracle(self):
        params = sphere_field()
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=3000.0,
                               n_coarse=64, n_fine=64)
        o, d, tn, tf_ = self.ray_setup()
        out = rd.render_rays(params, o, d, tn, tf_, ctx,
                             np.random.default_rng(0))
        mean_delta = (tf_[0] - tn[0]) / 128.0
        assert abs(out["prob_distance"][0] - 1.3) < 2.0 * mean_delta
        assert abs(out["rendered_distance"][0] - 1.3) < 2.0 * mean_delta

    def test_miss_ray_low_acc(self):
        # Second ray passes 0.4 away from the sphere surface at its closest.
        params = sphere_field()
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=3000.0,
                               n_coarse=48, n_fine=32)
        o, d, tn, tf_ = self.ray_setup()
        out = rd.render_rays(params, o, d, tn, tf_, ctx,
                             np.random.default_rng(0))
        assert out["acc"][1] < 0.05
        assert out["acc"][0] > 0.95

    def test_weight_sum_invariant_on_real_field(self):
        params = sphere_field()
        for mode, bound in [(VolSDFGlobal(500.0), 0.0),
                            (VolSDFLocal(), 100.0), (TUVRLocal(), 100.0)]:
            ctx = rd.RenderContext(mode=mode, scale_bound=bound,
                                   n_coarse=24, n_fine=16)
            o, d, tn, tf_ = self.ray_setup()
            tape = tp.Tape()
            br = rd.render_batch(TapeField(tape, params), o, d, tn, tf_, ctx,
                                 np.random.default_rng(1))
            raw = br.w.value.sum(axis=1)
            assert np.max(np.abs(raw - (1.0 - br.T_end))) < 1e-12
            assert np.all(br.acc_np <= 1.0)
            assert np.all((br.prob_distance >= tn) & (br.prob_distance <= tf_))

    def test_deterministic_same_seed(self):
        params = init_field_params(FieldConfig(n_levels=2, r_min=4, r_max=8,
                                               geo_width=16, feat_dim=3,
                                               color_width=16), seed=3)
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=100.0,
                               n_coarse=16, n_fine=8, grad_mode="stochastic",
                               eps_max=0.05)
        o, d, tn, tf_ = self.ray_setup()
        a = rd.render_rays(params, o, d, tn, tf_, ctx, np.random.default_rng(7))
        b = rd.render_rays(params, o, d, tn, tf_, ctx, np.random.default_rng(7))
        npt.assert_array_equal(a["color"], b["color"])
        npt.assert_array_equal(a["prob_distance"], b["prob_distance"])

    def test_stochastic_grad_mode_probe_steps(self):
        params = sphere_field()
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=100.0,
                               n_coarse=12, n_fine=0, grad_mode="stochastic",
                               eps_max=0.02)
        o, d, tn, tf_ = self.ray_setup()
        tape = tp.Tape()
        br = rd.render_batch(TapeField(tape, params), o, d, tn, tf_, ctx,
                             np.random.default_rng(2))
        assert br.grad_step.shape == (24,)
        assert np.all((br.grad_step > 0) & (br.grad_step <= 0.02))
        # central differences on ||p|| - r recover the radial direction up
        # to the O(eps^2) curvature term
        radial = br.points / np.linalg.norm(br.points, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", br.grad.value, radial)
        npt.assert_allclose(cos, 1.0, atol=1e-3)

    def test_analytic_grad_matches_radial_direction(self):
        params = sphere_field()
        ctx = rd.RenderContext(mode=TUVRLocal(), scale_bound=500.0,
                               n_coarse=16, n_fine=8)
        o, d, tn, tf_ = self.ray_setup()
        tape = tp.Tape()
        br = rd.render_batch(TapeField(tape, params), o, d, tn, tf_, ctx,
                             np.random.default_rng(2))
        radial = br.points / np.linalg.norm(br.points, axis=1, keepdims=True)
        npt.assert_allclose(br.grad.value, radial, atol=1e-12)

    def test_color_gradients_reach_parameters(self):
        params = init_field_params(FieldConfig(n_levels=2, r_min=4, r_max=8,
                                               geo_width=16, feat_dim=3,
                                               color_width=16), seed=5)
        # the output heads start zeroed, which blocks gradient flow into the
        # trunk by construction; randomize them to probe full connectivity
        rng = np.random.default_rng(8)
        for k in ("geo_out_w", "geo_out_b", "scale_w"):
            params.tensors[k] = rng.normal(0, 0.3, size=params.tensors[k].shape)
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=100.0,
                               n_coarse=12, n_fine=4)
        o, d, tn, tf_ = self.ray_setup()
        tape = tp.Tape()
        tf_field = TapeField(tape, params)
        br = rd.render_batch(tf_field, o, d, tn, tf_, ctx,
                             np.random.default_rng(4))
        g = tape.backward(tp.mean(br.color))
        got_signal = sum(np.abs(g.wrt(v)).sum() > 0
                         for v in tf_field.vars.values())
        assert got_signal >= len(tf_field.vars) - 1  # all but maybe a bias

    def test_empty_interval_rejected_and_background_fill(self):
        params = sphere_field()
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=100.0,
                               n_coarse=8, n_fine=0, background=(0.1, 0.2, 0.3))
        tape = tp.Tape()
        with pytest.raises(ValueError):
            rd.render_batch(TapeField(tape, params), [[0, 0, 2]], [[0, 0, -1]],
                            [1.0], [1.0], ctx, np.random.default_rng(0))
        out = rd.render_rays(params, [[0, 0, 2]], [[0, 0, -1]], [1.0], [1.0],
                             ctx, np.random.default_rng(0))
        npt.assert_array_equal(out["color"][0], [0.1, 0.2, 0.3])
        assert out["acc"][0] == 0.0


class TestRenderRay:
    def test_single_ray_result_consistency(self):
        params = sphere_field()
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=3000.0,
                               n_coarse=32, n_fine=32)
        ray = Ray(origin=np.array([0.0, 0.0, 1.8]),
                  direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.75, t_far=2.85)
        res = rd.render_ray(params, ray, ctx, np.random.default_rng(6))
        s = res.samples
        assert np.all(np.diff(s.t) > 0) and np.all(s.delta > 0)
        assert s.T[0] == 1.0
        npt.assert_allclose(s.w, s.T * s.alpha, rtol=1e-15)
        assert res.prob_distance == s.t[s.argmax_index]
        assert ray.t_near <= res.prob_distance <= ray.t_far
        assert res.f.shape == s.t.shape
        # front crossing of the exact sphere SDF sits where f changes sign
        k = np.argmax(res.f < 0)
        assert abs(s.t[k] - 1.3) < 2 * s.delta[max(k - 1, 0)] + s.delta[k]
        assert res.color.shape == (3,)
        assert np.all(res.color >= 0) and np.all(res.color <= 1 + 1e-9)

    def test_refinement_consistency(self):
        params = sphere_field()
        ray = Ray(origin=np.array([0.0, 0.0, 1.8]),
                  direction=np.array([0.0, 0.0, -1.0]),
                  t_near=0.75, t_far=2.85)
        cols = []
        for nc in (64, 128):
            ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=3000.0,
                                   n_coarse=nc, n_fine=64)
            res = rd.render_ray(params, ray, ctx, np.random.default_rng(8))
            cols.append(res.color)
        assert np.max(np.abs(cols[0] - cols[1])) < 1e-3

    def test_render_image_smoke(self):
        from nrd.dataset import fibonacci_cameras
        from nrd.scenes import sphere_checker_scene
        params = sphere_field()
        cam = fibonacci_cameras(sphere_checker_scene(), 1, radius=1.8,
                                resolution=8, seed=0)[0]
        ctx = rd.RenderContext(mode=VolSDFLocal(), scale_bound=500.0,
                               n_coarse=16, n_fine=8)
        img = rd.render_image(params, cam, ctx, np.random.default_rng(0))
        assert img.shape == (8, 8, 3)
        assert np.all(np.isfinite(img))
        assert np.all((img >= 0) & (img <= 1 + 1e-9))
