"""Command-line surface: data generation, training, diagnostics, evaluation.

Subcommands: gen-data, train, bias-sweep, gradcheck, ablate, extract-mesh,
eval-mesh.  Exit codes are fixed for scripting: 0 success, 2 usage or
validation error, 3 I/O error, 4 numeric failure, 5 check failure.

Every command is deterministic given its flags and seed.  Linear algebra
is pinned to a single thread before numpy first loads, so that BLAS
reduction order can never change results between machines or runs;
``--threads`` (env fallback NRD_THREADS) fans out only the parts that are
bit-stable by construction — mesh-extraction slabs and nearest-neighbor
metric queries — and therefore never changes any output byte.
"""

import os
import sys

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ[_var] = "1"

import argparse

import numpy as np

from . import biaslab, tape as tp
from .biaslab import emit_bias_sweep
from .config import (ConfigError, SCENES, read_run_config, scene_by_name)
from . import config as _config
from . import dataset as _dataset
from . import field as _field
from . import mesh as _mesh
from .dataset import generate_dataset, read_dataset, write_dataset
from .field import (FieldConfig, FieldParams, TapeField, field_eval,
                    field_grad_analytic, init_field_params, init_geometric,
                    read_checkpoint)
from .losses import (LossWeights, _perturbation_dirs, loss_bias, loss_color,
                     loss_eikonal, loss_smooth, loss_stage, make_smooth_plan)
from .mesh import (EmptyCloud, EmptyMesh, evaluate, marching_cubes,
                   metrics_csv, read_obj, sample_surface, write_obj)
from .render import RenderContext, render_batch
from .conversion import TUVRLocal, VolSDFLocal
from .trainer import (ABLATION_TOGGLES, NonFiniteLoss, TrainLog,
                      ablation_matrix, run_two_stage)

_IO_ERRORS = (_config.IoError, _dataset.IoError, _field.IoError,
              _mesh.IoError, biaslab.IoError, _dataset.FormatError,
              _field.FormatError, _mesh.FormatError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5


# ---------------------------------------------------------------------------
# gradcheck micro-batches
# ---------------------------------------------------------------------------

GRADCHECK_TOL = 1e-4

_GC_CFG = FieldConfig(n_levels=2, r_min=4, r_max=8, geo_width=16, feat_dim=3,
                      color_width=16)


def _gc_params(seed: int) -> FieldParams:
    """Random small field with live output heads so gradients flow."""
    params = init_field_params(_GC_CFG, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k in ("geo_out_w", "geo_out_b", "scale_w", "scale_b"):
        params.tensors[k] = rng.normal(0, 0.3, size=params.tensors[k].shape)
    for k in list(params.tensors):
        if k.startswith("grid"):
            params.tensors[k] = rng.normal(0, 0.05,
                                           size=params.tensors[k].shape)
    return params


def _bias_params(seed: int) -> FieldParams:
    """Noisy sphere field: guaranteed sign change along a probing ray.

    The bias term is a positive part, so a field that is negative along
    the whole ray would make its check trivially zero; a perturbed exact
    sphere keeps the probe points solidly positive while every geometry
    tensor still carries gradient.
    """
    params = init_field_params(_GC_CFG, seed=seed)
    init_geometric(params, radius=0.5)
    rng = np.random.default_rng(seed + 300)
    for k in list(params.tensors):
        if k.startswith("grid"):
            params.tensors[k] = rng.normal(0, 0.02,
                                           size=params.tensors[k].shape)
    for k in ("geo_out_w", "scale_w"):
        params.tensors[k] = params.tensors[k] \
            + rng.normal(0, 0.02, size=params.tensors[k].shape)
    return params


def _corrupt_grad(v: tp.Var) -> tp.Var:
    """Identity whose adjoint is deliberately 25% wrong (fault injection)."""
    return v.tape._push(v.value + 0.0, (v.i,), lambda g: (1.25 * g,))


def _field_build(names, build_term, init_radius):
    """Wrap a term builder so gradcheck leaves are the field tensors.

    ``init_radius`` is not differentiated but must survive the rebuild:
    zeroing it would silently drop the geometric offset from the field.
    """
    def build(t, vs):
        pp = FieldParams(_GC_CFG, dict(zip(names, [v.value for v in vs]),
                                       init_radius=init_radius))
        tf = TapeField(t, pp)
        tf.vars = dict(zip(names, vs))
        return build_term(t, tf)
    return build


def gradcheck_reports(seed: int = 0, corrupt: bool = False):
    """One GradcheckReport per loss term plus both stage totals.

    Every term is differentiated through the field parameters on a seeded
    micro-batch.  ``corrupt`` routes the color term through an identity op
    with a wrong adjoint, so the check must fail — a self-test that the
    checker can actually catch broken derivatives.
    """
    params = _gc_params(seed + 1)
    names = sorted(k for k in params.tensors if k != "init_radius")
    leaves = [params.tensors[k] for k in names]
    o = np.array([[0.0, 0.0, 1.5], [0.2, -0.1, 1.4]])
    d = np.tile([0.0, 0.0, -1.0], (2, 1))
    tn, tfar = np.full(2, 0.5), np.full(2, 2.5)
    gt = np.full((2, 3), 0.4)

    def render(t, tf, grad_mode, mode=None):
        ctx = RenderContext(mode=mode or VolSDFLocal(), scale_bound=20.0,
                            n_coarse=8, n_fine=0, grad_mode=grad_mode,
                            eps_max=0.03)
        return ctx, render_batch(tf, o, d, tn, tfar, ctx,
                                 np.random.default_rng(seed + 5))

    def color_term(t, tf):
        _, br = render(t, tf, "stochastic")
        loss = loss_color(br.color, gt)
        return _corrupt_grad(loss) if corrupt else loss

    def eik_term(grad_mode):
        def term(t, tf):
            _, br = render(t, tf, grad_mode)
            return loss_eikonal(br.grad)
        return term

    # Frozen micro-batch inputs, fixed at the base parameters the way one
    # training step fixes them: t_star where the probe value is largest (so
    # the bias term is active, not a trivial zero) and pinned perturbation
    # directions (so finite differences see no hidden rng-through-normals
    # dependence).
    bias_params = _bias_params(seed + 2)
    bias_leaves = [bias_params.tensors[k] for k in names]
    probe_ts = np.linspace(0.3, 2.2, 39)
    t_star = np.empty(2)
    for i in range(2):
        probes = o[i] + (probe_ts + 0.05)[:, None] * d[i]
        f = field_eval(bias_params, probes, check=False)[0]
        t_star[i] = probe_ts[int(np.argmax(f))]
    smooth_pts = np.array([[0.0, 0.1, 0.4], [0.3, -0.2, 0.1],
                           [-0.2, 0.0, 0.3]])
    eta = _perturbation_dirs(field_grad_analytic(params, smooth_pts,
                                                 check=False),
                             np.random.default_rng(seed + 7))

    def bias_term(t, tf):
        loss, n_act = loss_bias(tf, o, d, t_star, -np.ones((2, 4)),
                                eps_bias=0.05, eps_bias_mask=0.01,
                                scale_bound=20.0, sky_skip=False)
        assert n_act > 0 and loss.value > 0, "bias micro-batch went inactive"
        return loss

    def smooth_term(t, tf):
        return loss_smooth(tf, smooth_pts, eps_smooth=0.01,
                           scale_bound=20.0, eta=eta)

    def stage_term(stage, mode, grad_mode):
        plan = None
        if stage == 2:
            t0 = tp.Tape()
            ctx0, br0 = render(t0, TapeField(t0, params), grad_mode, mode)
            plan = make_smooth_plan(params, br0, np.random.default_rng(seed + 6))

        def term(t, tf):
            ctx, br = render(t, tf, grad_mode, mode)
            total, _ = loss_stage(stage, tf, ctx, br, gt,
                                  LossWeights(eps_bias=0.05), step=100,
                                  rng=np.random.default_rng(seed + 6),
                                  smooth_plan=plan)
            return total
        return term

    r_main = params.tensors["init_radius"]
    r_bias = bias_params.tensors["init_radius"]
    terms = [
        ("color", color_term, leaves, r_main),
        ("eikonal_stochastic", eik_term("stochastic"), leaves, r_main),
        ("eikonal_analytic", eik_term("analytic"), leaves, r_main),
        ("bias", bias_term, bias_leaves, r_bias),
        ("smooth", smooth_term, leaves, r_main),
        ("stage1_total", stage_term(1, VolSDFLocal(), "stochastic"),
         leaves, r_main),
        ("stage2_total", stage_term(2, TUVRLocal(), "analytic"),
         leaves, r_main),
    ]
    reports = []
    for i, (name, term, lv, radius) in enumerate(terms):
        rep = tp.gradcheck(_field_build(names, term, radius), lv,
                           max_coords=60, seed=seed + i)
        reports.append((name, rep))
    return reports


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, threads: int) -> int:
    scene = scene_by_name(args.scene)
    ds = generate_dataset(scene, n_views=args.views, radius=args.radius,
                          resolution=args.res, seed=args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {args.out}: {args.views} views at {args.res}x{args.res}, "
          f"seed {args.seed}")
    return EXIT_OK


def cmd_train(args, threads: int) -> int:
    cfg = read_run_config(args.config)
    out_dir = args.out_dir if args.out_dir else cfg.output_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise _config.IoError(f"cannot create {out_dir}: {e}") from e
    if cfg.scene is not None:
        scene = scene_by_name(cfg.scene)
        ds = generate_dataset(scene, n_views=cfg.n_views,
                              radius=cfg.view_radius,
                              resolution=cfg.view_resolution, seed=cfg.seed)
    else:
        scene, ds = None, read_dataset(cfg.dataset_path)
    params = init_field_params(cfg.field, seed=cfg.seed)
    init_geometric(params, radius=cfg.init_radius)
    final, (log1, log2) = run_two_stage(params, ds, cfg.stage1, cfg.stage2,
                                        ckpt_dir=out_dir)
    log = TrainLog()
    log.extend(log1)
    log.extend(log2)
    log.to_csv(os.path.join(out_dir, "train_log.csv"))
    mesh = marching_cubes(final, cfg.eval.mc_resolution, n_threads=threads)
    write_obj(mesh, os.path.join(out_dir, "mesh.obj"))
    stage_note = (f"stage1 {len(log1.rows)} steps, "
                  f"stage2 {len(log2.rows)} steps")
    if mesh.is_empty:
        print(f"{stage_note}; mesh is empty at resolution "
              f"{cfg.eval.mc_resolution}; metrics skipped")
        return EXIT_OK
    print(f"{stage_note}; mesh {len(mesh.vertices)} vertices "
          f"{len(mesh.triangles)} triangles")
    if scene is not None:
        pred = sample_surface(mesh, cfg.eval.n_metric_points, seed=cfg.seed)
        gt = sample_surface(scene, cfg.eval.n_metric_points,
                            seed=cfg.seed + 1)
        rep = evaluate(pred, gt, threshold=cfg.eval.fscore_threshold,
                       workers=threads)
        metrics_csv(rep, os.path.join(out_dir, "metrics.csv"))
        print(_metrics_line(rep))
    return EXIT_OK


def _metrics_line(rep) -> str:
    return (f"acc {rep.accuracy:.6g} comp {rep.completeness:.6g} "
            f"prec {rep.precision:.4f} recall {rep.recall:.4f} "
            f"fscore {rep.fscore:.4f} (tau {rep.threshold:g})")


def _parse_angles_deg(raw: str) -> np.ndarray:
    vals = []
    for token in raw.split(","):
        token = token.strip().removesuffix("deg").strip()
        vals.append(float(token))
    return np.deg2rad(np.array(vals))


def _parse_floats(raw: str) -> np.ndarray:
    return np.array([float(tok) for tok in raw.split(",")])


def cmd_bias_sweep(args, threads: int) -> int:
    # the demo grid applies only to axes left unspecified: pinning one axis
    # collapses the other to a single representative value, so a lone
    # `--theta 30deg` yields exactly one row
    if args.theta is None and args.s is None:
        theta = np.deg2rad(np.linspace(10.0, 90.0, 10))
        s_grid = np.linspace(0.02, 0.3, 5)
    else:
        theta = (_parse_angles_deg(args.theta) if args.theta
                 else np.deg2rad(np.array([45.0])))
        s_grid = _parse_floats(args.s) if args.s else np.array([0.1])
    results = emit_bias_sweep(theta, s_grid, args.out, d=args.distance,
                              n_samples=args.samples)
    print(f"wrote {args.out}: {len(results)} rows "
          f"({theta.size} angles x {s_grid.size} scales, "
          f"{args.samples} samples)")
    if args.check is not None:
        gaps = np.array([abs(r.t_star_closed - r.t_star_numeric)
                         for r in results])
        worst = int(np.argmax(gaps))
        # rows are emitted angle-major, so recover the worst grid point
        th = np.rad2deg(theta[worst // s_grid.size])
        sw = s_grid[worst % s_grid.size]
        print(f"worst |closed - numeric| = {gaps[worst]:.3e} "
              f"at theta {th:.1f} deg, s {sw:g}")
        if gaps[worst] > args.check:
            print(f"FAIL: exceeds tolerance {args.check:g}", file=sys.stderr)
            return EXIT_CHECK
        print(f"all rows within tolerance {args.check:g}")
    return EXIT_OK


def cmd_gradcheck(args, threads: int) -> int:
    reports = gradcheck_reports(seed=args.seed, corrupt=args.corrupt)
    ok = True
    for name, rep in reports:
        passed = rep.max_rel_err < GRADCHECK_TOL
        ok = ok and passed
        print(f"{name:<20s} max rel err {rep.max_rel_err:.3e}  "
              f"({rep.n_checked} coords, {rep.n_kink_excluded} at kinks)  "
              f"{'ok' if passed else 'FAIL'}")
    if not ok:
        print(f"FAIL: at least one term >= {GRADCHECK_TOL:g}",
              file=sys.stderr)
        return EXIT_CHECK
    print(f"all terms < {GRADCHECK_TOL:g}")
    return EXIT_OK


def cmd_ablate(args, threads: int) -> int:
    toggles = tuple(t.strip() for t in args.toggles.split(",") if t.strip())
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            known = ", ".join(ABLATION_TOGGLES)
            print(f"unknown toggle {t!r} (known: {known})", file=sys.stderr)
            return EXIT_USAGE
    cfg = read_run_config(args.config)
    if cfg.scene is None:
        print("ablate needs an analytic scene for ground truth; the config "
              "uses a dataset path", file=sys.stderr)
        return EXIT_USAGE
    scene = scene_by_name(cfg.scene)
    ds = generate_dataset(scene, n_views=cfg.n_views, radius=cfg.view_radius,
                          resolution=cfg.view_resolution, seed=cfg.seed)
    rows = ablation_matrix(scene, ds, cfg.field, cfg.stage1, cfg.stage2,
                           toggles=toggles, csv_path=args.out,
                           init_radius=cfg.init_radius,
                           mc_resolution=cfg.eval.mc_resolution,
                           n_points=cfg.eval.n_metric_points,
                           threshold=cfg.eval.fscore_threshold)
    for r in rows:
        print(f"{r['variant']:<28s} acc {r['acc']:.6g} comp {r['comp']:.6g} "
              f"fscore {r['fscore']:.4f}")
    print(f"wrote {args.out}: {len(rows)} variants")
    return EXIT_OK


def cmd_extract_mesh(args, threads: int) -> int:
    params = read_checkpoint(args.ckpt)
    mesh = marching_cubes(params, args.resolution, n_threads=threads)
    write_obj(mesh, args.out)
    if mesh.is_empty:
        print(f"wrote {args.out}: empty mesh (no zero crossing at "
              f"resolution {args.resolution})")
    else:
        print(f"wrote {args.out}: {len(mesh.vertices)} vertices, "
              f"{len(mesh.triangles)} triangles")
    return EXIT_OK


def cmd_eval_mesh(args, threads: int) -> int:
    pred = sample_surface(read_obj(args.pred), args.points, seed=args.seed)
    if args.gt_scene:
        gt_obj = scene_by_name(args.gt_scene)
    else:
        gt_obj = read_obj(args.gt)
    gt = sample_surface(gt_obj, args.points, seed=args.seed + 1)
    rep = evaluate(pred, gt, threshold=args.threshold, workers=threads)
    print(_metrics_line(rep))
    if args.out:
        metrics_csv(rep, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nrd",
        description="Two-stage SDF volume rendering and reconstruction lab.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for mesh slabs and metric "
                             "queries (default: env NRD_THREADS or 1); "
                             "never changes any output byte")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="render a synthetic multi-view dataset")
    p.add_argument("--scene", required=True, choices=sorted(SCENES))
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--radius", type=float, default=1.8)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="two-stage training run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None,
                   help="override the config's output_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser(
        "bias-sweep", parents=[common],
        help="closed-form vs numeric max-weight offset over a grid",
        description="Sweeps the single-plane scenario over incidence angles "
                    "and density widths.  The scale flag --s is the width of "
                    "the distance-to-density conversion (the reciprocal of "
                    "the sharpness used elsewhere); offsets grow linearly "
                    "with it.")
    p.add_argument("--theta", default=None,
                   help="comma list of incidence angles in degrees "
                        "(e.g. '30deg' or '10,50,90'); default 10..90 in 10")
    p.add_argument("--s", default=None,
                   help="comma list of conversion widths; default 0.02..0.3 "
                        "in 5")
    p.add_argument("--distance", type=float, default=1.0,
                   help="perpendicular distance of the plane from the origin")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--check", type=float, default=None, metavar="TOL",
                   help="exit 5 unless |closed - numeric| <= TOL on every "
                        "row")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bias_sweep)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every loss term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true",
                   help="fault-injection self-test: corrupt one derivative "
                        "and expect the check to fail")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common],
                       help="train the full model plus toggled variants")
    p.add_argument("--config", required=True)
    p.add_argument("--toggles", default="",
                   help="comma list from: " + ", ".join(ABLATION_TOGGLES))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("extract-mesh", parents=[common],
                       help="marching cubes on a checkpointed field")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract_mesh)

    p = sub.add_parser("eval-mesh", parents=[common],
                       help="point-cloud metrics of a mesh vs ground truth")
    p.add_argument("--pred", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--gt-scene", choices=sorted(SCENES))
    g.add_argument("--gt", help="ground-truth mesh file")
    p.add_argument("--points", type=int, default=20_000)
    p.add_argument("--threshold", type=float, default=0.025)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also write a metrics CSV")
    p.set_defaults(fn=cmd_eval_mesh)
    return parser


def _resolve_threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get("NRD_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"NRD_THREADS={raw!r} is not an integer")
    if n < 1:
        raise ValueError("--threads must be >= 1")
    return n


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        threads = _resolve_threads(args)
    except ValueError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args, threads)
    except _IO_ERRORS as e:
        print(str(e), file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        last = e.step - 1 if e.step > 0 else None
        where = f"last good step {last}" if last is not None \
            else "failed on the first step"
        print(f"numeric failure: {e} ({where})", file=sys.stderr)
        return EXIT_NUMERIC
    except (tp.NonFiniteValue, biaslab.DegenerateWeights,
            EmptyMesh, EmptyCloud) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
