"""Two-stage optimization: batching, Adam updates, schedules, logging.

Stage 1 trains with the plain per-point conversion and stochastic-step
gradient estimates (plus the explicit peak-alignment penalty); stage 2
switches to the slope-rescaled conversion with analytic gradients and a
normal-smoothness term, ramping the sharpness bound up from where stage 1
left it.  Every step samples pixel rays uniformly from the dataset pool,
renders a batch, backpropagates the stage loss, and applies one Adam
update in fixed (sorted-key) order, so a run is a pure function of config
plus seed.

Verification (tests/test_trainer.py): the Adam step against a hand-rolled
oracle, bit-identical reruns, zero-step identity, strict loss decrease on
the sphere fixture, scale-bound monotonicity and stage handoff, the
non-finite abort policy, checkpoint-resume equivalence, and the ablation
matrix bookkeeping.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import tape as tp
from .conversion import (ScaleSchedule, TUVRLocal, VolSDFGlobal, VolSDFLocal,
                         scale_bound)
from .dataset import SyntheticDataset, dataset_rays
from .field import (FieldConfig, FieldParams, TapeField, init_field_params,
                    init_geometric, write_checkpoint)
from .losses import LossWeights, loss_stage
from .mesh import (METRICS_HEADER, EmptyMesh, IoError, evaluate,
                   marching_cubes, sample_surface)
from .render import RenderContext, render_batch

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class NonFiniteLoss(Exception):
    """Loss or gradient went non-finite; training aborted before the update.

    Carries ``step`` and ``params`` (the state after the last completed
    update); an on-disk checkpoint written by an earlier snapshot is left
    untouched.
    """

    def __init__(self, msg, step: int, params: FieldParams):
        super().__init__(msg)
        self.step = step
        self.params = params


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    """Everything one stage needs.

    ``conversion`` is a mode instance; a VolSDFGlobal value acts as a
    marker for the global-scale variant — its sharpness is replaced each
    step by the scheduled bound, so the global scale follows the same
    schedule the per-point bound would.
    """
    stage: int
    n_steps: int
    batch_rays: int
    conversion: object
    grad_mode: str
    eps_max: float = 0.05
    weights: LossWeights = dc_field(default_factory=LossWeights)
    scale_schedule: ScaleSchedule = dc_field(default_factory=ScaleSchedule)
    lr: float = 5e-3
    lr_decay: tuple = ()
    seed: int = 0
    n_coarse: int = 40
    n_fine: int = 24

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if self.grad_mode not in ("stochastic", "analytic"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")


def stage1_config(**overrides) -> StageConfig:
    d = dict(stage=1, n_steps=2000, batch_rays=128, conversion=VolSDFLocal(),
             grad_mode="stochastic")
    d.update(overrides)
    return StageConfig(**d)


def stage2_config(**overrides) -> StageConfig:
    # lr drops by 10x at 50% and again at 80% of the refinement run
    d = dict(stage=2, n_steps=3000, batch_rays=128, conversion=TUVRLocal(),
             grad_mode="analytic", lr_decay=((1500, 0.1), (2400, 0.1)))
    d.update(overrides)
    return StageConfig(**d)


def current_lr(cfg: StageConfig, step: int) -> float:
    lr = cfg.lr
    for at, factor in cfg.lr_decay:
        if step >= at:
            lr *= factor
    return lr


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; tensors visited in sorted-name order.

    Updates run in place through two shared scratch buffers: moment decay,
    squared-gradient accumulation, and the bias-corrected step are the same
    expressions as the textbook form, just without per-tensor temporaries
    (the grids dominate the parameter count, so allocation traffic would
    otherwise rival the backward pass).
    """

    def __init__(self, params: FieldParams):
        self.keys = sorted(k for k in params.tensors if k != "init_radius")
        self.m = {k: np.zeros_like(params.tensors[k]) for k in self.keys}
        self.v = {k: np.zeros_like(params.tensors[k]) for k in self.keys}
        self.t = 0
        top = max(params.tensors[k].size for k in self.keys)
        self._scr = (np.empty(top), np.empty(top))

    def step(self, params: FieldParams, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - ADAM_B1 ** self.t
        c2 = 1.0 - ADAM_B2 ** self.t
        for k in self.keys:
            g, m, v = grads[k], self.m[k], self.v[k]
            num = self._scr[0][:g.size].reshape(g.shape)
            den = self._scr[1][:g.size].reshape(g.shape)
            # m = B1*m + (1-B1)*g ; v = B2*v + (1-B2)*g*g
            np.multiply(m, ADAM_B1, out=m)
            np.multiply(g, 1.0 - ADAM_B1, out=num)
            m += num
            np.multiply(v, ADAM_B2, out=v)
            np.multiply(g, 1.0 - ADAM_B2, out=num)
            num *= g
            v += num
            # p -= lr * (m/c1) / (sqrt(v/c2) + eps)
            np.divide(v, c2, out=den)
            np.sqrt(den, out=den)
            den += ADAM_EPS
            np.divide(m, c1, out=num)
            num *= lr
            num /= den
            params.tensors[k] -= num


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------

TRAIN_LOG_HEADER = ["step", "color", "eikonal", "bias", "smooth", "total",
                    "scale_bound", "ms"]


@dataclass
class TrainLog:
    rows: list = dc_field(default_factory=list)

    def append(self, step: int, bd, bound: float, ms: float):
        self.rows.append({"step": step, "color": bd.color,
                          "eikonal": bd.eikonal, "bias": bd.bias,
                          "smooth": bd.smooth, "total": bd.total,
                          "scale_bound": bound, "ms": ms})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def extend(self, other: "TrainLog"):
        self.rows.extend(other.rows)

    def to_csv(self, path: str):
        try:
            with open(path, "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(TRAIN_LOG_HEADER)
                for r in self.rows:
                    out.writerow([r["step"]]
                                 + [f"{r[k]:.17g}" for k in TRAIN_LOG_HEADER[1:-1]]
                                 + [f"{r['ms']:.3f}"])
        except OSError as e:
            raise IoError(f"cannot write train log to {path}: {e}") from e


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _ray_pool(dataset) -> dict:
    pool = dataset_rays(dataset) if isinstance(dataset, SyntheticDataset) \
        else dict(dataset)
    keep = pool["t_far"] > pool["t_near"]
    if not np.any(keep):
        raise ValueError("dataset has no rays intersecting the domain")
    return {k: np.asarray(v)[keep] for k, v in pool.items()}


def _copy_params(params: FieldParams) -> FieldParams:
    return FieldParams(params.cfg, {k: v.copy() for k, v in params.tensors.items()})


def _step_mode(cfg: StageConfig, bound: float):
    if isinstance(cfg.conversion, VolSDFGlobal):
        return VolSDFGlobal(s=bound)
    return cfg.conversion


def train_stage(params: FieldParams, dataset, cfg: StageConfig,
                ckpt_path: str | None = None, snapshot_every: int = 500):
    """Optimize one stage; returns (new params, TrainLog).

    The input params are not mutated.  When ``ckpt_path`` is given the
    current state is written there every ``snapshot_every`` steps and at
    completion; a NonFiniteLoss abort leaves the last snapshot in place.
    """
    pool = _ray_pool(dataset)
    n_pool = len(pool["t_near"])
    work = _copy_params(params)
    log = TrainLog()
    if cfg.n_steps == 0:
        return work, log
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(work)
    for step in range(cfg.n_steps):
        t_start = time.perf_counter()
        bound = scale_bound(step, cfg.stage, cfg.scale_schedule)
        ctx = RenderContext(mode=_step_mode(cfg, bound), scale_bound=bound,
                            n_coarse=cfg.n_coarse, n_fine=cfg.n_fine,
                            grad_mode=cfg.grad_mode, eps_max=cfg.eps_max)
        idx = rng.integers(0, n_pool, size=cfg.batch_rays)
        tape = tp.Tape()
        tf = TapeField(tape, work)
        br = render_batch(tf, pool["origins"][idx], pool["dirs"][idx],
                          pool["t_near"][idx], pool["t_far"][idx], ctx, rng)
        total, bd = loss_stage(cfg.stage, tf, ctx, br, pool["rgb"][idx],
                               cfg.weights, step, rng)
        if not np.isfinite(bd.total):
            raise NonFiniteLoss(f"non-finite loss at step {step}", step, work)
        go = tape.backward(total)
        grads = {k: go.wrt(v) for k, v in tf.vars.items()}
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteLoss(f"non-finite gradient for {bad} at step {step}",
                                step, work)
        adam.step(work, grads, current_lr(cfg, step))
        log.append(step, bd, bound, (time.perf_counter() - t_start) * 1e3)
        if ckpt_path and (step + 1) % snapshot_every == 0:
            write_checkpoint(work, ckpt_path)
    if ckpt_path:
        write_checkpoint(work, ckpt_path)
    return work, log


def run_two_stage(params: FieldParams, dataset, cfg1: StageConfig,
                  cfg2: StageConfig, ckpt_dir: str | None = None):
    """Coarse stage then refinement; returns (params, (log1, log2)).

    The sharpness bound hands off because the refinement ramp starts at the
    schedule's coarse bound.  Optimizer moments are NOT carried across the
    boundary — each stage builds a fresh Adam state (documented choice).
    With ``ckpt_dir`` set, stage1.ckpt and final.ckpt are written at the
    stage boundaries.
    """
    if cfg1.stage != 1 or cfg2.stage != 2:
        raise ValueError("run_two_stage wants a stage-1 and a stage-2 config")
    p1, log1 = train_stage(params, dataset, cfg1,
                           ckpt_path=f"{ckpt_dir}/stage1.ckpt" if ckpt_dir else None)
    p2, log2 = train_stage(p1, dataset, cfg2,
                           ckpt_path=f"{ckpt_dir}/final.ckpt" if ckpt_dir else None)
    if ckpt_dir:
        # stage boundaries are always on disk, even with tiny step counts
        write_checkpoint(p1, f"{ckpt_dir}/stage1.ckpt")
        write_checkpoint(p2, f"{ckpt_dir}/final.ckpt")
    return p2, (log1, log2)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_TOGGLES = ("global_scale", "analytic_grad_stage1", "no_bias_loss",
                    "single_stage", "no_eik_stage1_norm_est",
                    "no_eik_stage1_norm_analytic")

ABLATION_HEADER = ["variant"] + METRICS_HEADER + ["seed"]


def variant_configs(name: str, cfg1: StageConfig, cfg2: StageConfig):
    """Config transform for one ablation toggle."""
    if name == "full":
        return cfg1, cfg2
    if name == "global_scale":
        return (replace(cfg1, conversion=VolSDFGlobal(s=1.0)),
                replace(cfg2, conversion=VolSDFGlobal(s=1.0)))
    if name == "analytic_grad_stage1":
        return replace(cfg1, grad_mode="analytic"), cfg2
    if name == "no_bias_loss":
        return (replace(cfg1, weights=replace(cfg1.weights, lambda_bias=0.0)),
                cfg2)
    if name == "single_stage":
        return (replace(cfg1, n_steps=cfg1.n_steps + cfg2.n_steps),
                replace(cfg2, n_steps=0))
    if name == "no_eik_stage1_norm_est":
        # drop the coarse eikonal term; color still sees estimated normals
        return (replace(cfg1, weights=replace(cfg1.weights, lambda_eik=0.0)),
                cfg2)
    if name == "no_eik_stage1_norm_analytic":
        # drop the coarse eikonal term; color sees analytic normals instead
        return (replace(cfg1, grad_mode="analytic",
                        weights=replace(cfg1.weights, lambda_eik=0.0)),
                cfg2)
    raise ValueError(f"unknown ablation toggle {name!r}")


def ablation_matrix(scene, dataset, field_cfg: FieldConfig, cfg1: StageConfig,
                    cfg2: StageConfig, toggles=(), csv_path: str | None = None,
                    init_radius: float = 0.5, mc_resolution: int = 64,
                    n_points: int = 20_000, threshold: float = 0.025):
    """Train the full model plus one variant per toggle; metrics per row.

    Every variant starts from identical initial parameters (field seed =
    cfg1.seed) and trains with the shared stage seeds, so rows differ only
    through the toggled mechanism.
    """
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise ValueError(f"unknown ablation toggle {t!r}")
    gt_cloud = sample_surface(scene, n_points, seed=cfg1.seed)
    rows = []
    for name in ("full",) + tuple(toggles):
        v1, v2 = variant_configs(name, cfg1, cfg2)
        params = init_field_params(field_cfg, seed=cfg1.seed)
        init_geometric(params, radius=init_radius)
        final, _ = run_two_stage(params, dataset, v1, v2)
        try:
            mesh = marching_cubes(final, mc_resolution)
            pred_cloud = sample_surface(mesh, n_points, seed=cfg1.seed)
            rep = evaluate(pred_cloud, gt_cloud, threshold)
            row = {"variant": name, "acc": rep.accuracy,
                   "comp": rep.completeness, "prec": rep.precision,
                   "recall": rep.recall, "fscore": rep.fscore,
                   "threshold": rep.threshold, "seed": cfg1.seed}
        except EmptyMesh:
            row = {"variant": name, "acc": np.inf, "comp": np.inf,
                   "prec": 0.0, "recall": 0.0, "fscore": 0.0,
                   "threshold": threshold, "seed": cfg1.seed}
        rows.append(row)
    if csv_path is not None:
        try:
            with open(csv_path, "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(ABLATION_HEADER)
                for r in rows:
                    out.writerow([r["variant"]]
                                 + [f"{r[k]:.17g}" for k in METRICS_HEADER]
                                 + [str(r["seed"])])
        except OSError as e:
            raise IoError(f"cannot write ablation table to {csv_path}: {e}") from e
    return rows
