"""Run configuration: a strict INI schema covering a full two-stage run.

A run file has up to six sections — [run], [field], [schedule], [stage1],
[stage2], [eval] — every key optional with desk-scale defaults, unknown
sections or keys rejected outright so hyperparameter typos fail loudly
instead of silently training with defaults.  ``emit_run_config`` writes
the fully-explicit normal form; parsing that text back yields an equal
RunConfig (semantic round-trip).

Per-stage RNG seeds are derived from the single global seed (stage 1
uses ``seed``, stage 2 uses ``seed + 1``) and both stages share the one
[schedule] section, so a config file cannot describe an incoherent run.
Exactly one geometry source is allowed: an analytic scene name or a
dataset file path.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field as dc_field

from .conversion import ScaleSchedule
from .field import FieldConfig
from .losses import BiasRamp, LossWeights
from .scenes import plane_bump_scene, room_slice_scene, sphere_checker_scene
from .trainer import StageConfig, stage1_config, stage2_config


class ConfigError(Exception):
    """Malformed, unknown, or inconsistent configuration input."""


class IoError(Exception):
    """Config file could not be read or written."""


SCENES = {
    "sphere-checker": sphere_checker_scene,
    "room-slice": room_slice_scene,
    "plane-bump": plane_bump_scene,
}


def scene_by_name(name: str):
    if name not in SCENES:
        known = ", ".join(sorted(SCENES))
        raise ConfigError(f"unknown scene {name!r} (known: {known})")
    return SCENES[name]()


@dataclass(frozen=True)
class EvalConfig:
    mc_resolution: int = 128
    fscore_threshold: float = 0.025
    n_metric_points: int = 20_000

    def __post_init__(self):
        if not (8 <= self.mc_resolution <= 512):
            raise ValueError("mc_resolution must be in [8, 512]")
        if self.fscore_threshold <= 0:
            raise ValueError("fscore_threshold must be > 0")
        if self.n_metric_points < 1:
            raise ValueError("n_metric_points must be >= 1")


@dataclass
class RunConfig:
    scene: str | None = "sphere-checker"
    dataset_path: str | None = None
    output_dir: str = "out"
    seed: int = 7
    n_views: int = 16
    view_radius: float = 1.8
    view_resolution: int = 64
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    init_radius: float = 0.3
    schedule: ScaleSchedule = dc_field(default_factory=ScaleSchedule)
    stage1: StageConfig = None
    stage2: StageConfig = None
    eval: EvalConfig = dc_field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.stage1 is None:
            object.__setattr__(self, "stage1", stage1_config(
                seed=self.seed, scale_schedule=self.schedule))
        if self.stage2 is None:
            object.__setattr__(self, "stage2", stage2_config(
                seed=self.seed + 1, scale_schedule=self.schedule))
        if (self.scene is None) == (self.dataset_path is None):
            raise ValueError("need exactly one of scene / dataset")
        if self.scene is not None and self.scene not in SCENES:
            raise ValueError(f"unknown scene {self.scene!r}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.n_views < 1 or self.view_resolution < 2:
            raise ValueError("need views >= 1 and view_resolution >= 2")
        if self.view_radius <= 0 or self.init_radius <= 0:
            raise ValueError("view_radius and init_radius must be > 0")
        if self.stage1.stage != 1 or self.stage2.stage != 2:
            raise ValueError("stage1/stage2 configs mislabeled")
        if self.stage1.seed != self.seed or self.stage2.seed != self.seed + 1:
            raise ValueError("stage seeds must derive from the global seed")
        if (self.stage1.scale_schedule != self.schedule
                or self.stage2.scale_schedule != self.schedule):
            raise ValueError("both stages must share the [schedule] section")


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------

_RUN_KEYS = ("scene", "dataset", "output_dir", "seed", "views",
             "view_radius", "view_resolution")
_FIELD_KEYS = ("n_levels", "r_min", "r_max", "channels", "geo_width",
               "geo_depth", "feat_dim", "color_width", "color_depth",
               "condition_on_normal", "init_radius")
_SCHEDULE_KEYS = ("s_coarse_bound", "s_fine_target", "fine_ramp_steps")
_STAGE_KEYS = ("n_steps", "batch_rays", "lr", "lr_decay", "grad_mode",
               "eps_max", "n_coarse", "n_fine", "lambda_eik", "lambda_smooth",
               "lambda_bias", "bias_ramp_lo", "bias_ramp_hi",
               "bias_ramp_steps", "eps_bias", "eps_bias_mask", "eps_smooth")
_EVAL_KEYS = ("mc_resolution", "fscore_threshold", "n_metric_points")
_SECTIONS = {"run": _RUN_KEYS, "field": _FIELD_KEYS,
             "schedule": _SCHEDULE_KEYS, "stage1": _STAGE_KEYS,
             "stage2": _STAGE_KEYS, "eval": _EVAL_KEYS}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_lr_decay(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    out = []
    for piece in raw.split(","):
        step, _, factor = piece.partition(":")
        if not _:
            raise ValueError(f"lr_decay entry {piece!r} is not step:factor")
        out.append((int(step), float(factor)))
    return tuple(sorted(out))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _fmt_lr_decay(decay) -> str:
    return ",".join(f"{s}:{_fmt(float(f))}" for s, f in decay)


class _Section:
    """One validated section: typed getters with located error messages."""

    def __init__(self, cp: configparser.ConfigParser, name: str):
        self.cp, self.name = cp, name

    def has(self, key: str) -> bool:
        return self.cp.has_option(self.name, key)

    def get(self, key: str, conv, fallback):
        if not self.has(key):
            return fallback
        raw = self.cp.get(self.name, key)
        try:
            return conv(raw)
        except ValueError as e:
            raise ConfigError(f"[{self.name}] {key}: {e}") from e


def _stage_weights(sec: _Section, defaults: LossWeights) -> LossWeights:
    ramp_keys = ("bias_ramp_lo", "bias_ramp_hi", "bias_ramp_steps")
    has_ramp = any(sec.has(k) for k in ramp_keys)
    if sec.has("lambda_bias") and has_ramp:
        raise ConfigError(f"[{sec.name}] lambda_bias conflicts with "
                          "bias_ramp_* keys; give one or the other")
    if sec.has("lambda_bias"):
        lam = sec.get("lambda_bias", float, None)
    elif has_ramp:
        base = defaults.lambda_bias if isinstance(defaults.lambda_bias,
                                                  BiasRamp) else BiasRamp()
        lam = BiasRamp(lo=sec.get("bias_ramp_lo", float, base.lo),
                       hi=sec.get("bias_ramp_hi", float, base.hi),
                       steps=sec.get("bias_ramp_steps", int, base.steps))
    else:
        lam = defaults.lambda_bias
    return LossWeights(
        lambda_eik=sec.get("lambda_eik", float, defaults.lambda_eik),
        lambda_smooth=sec.get("lambda_smooth", float, defaults.lambda_smooth),
        lambda_bias=lam,
        eps_bias=sec.get("eps_bias", float, defaults.eps_bias),
        eps_bias_mask=sec.get("eps_bias_mask", float, defaults.eps_bias_mask),
        eps_smooth=sec.get("eps_smooth", float, defaults.eps_smooth))


def _stage_from(sec: _Section, factory, seed: int,
                sched: ScaleSchedule) -> StageConfig:
    base = factory(seed=seed, scale_schedule=sched)
    return factory(
        seed=seed, scale_schedule=sched,
        n_steps=sec.get("n_steps", int, base.n_steps),
        batch_rays=sec.get("batch_rays", int, base.batch_rays),
        lr=sec.get("lr", float, base.lr),
        lr_decay=sec.get("lr_decay", _parse_lr_decay, base.lr_decay),
        grad_mode=sec.get("grad_mode", str.strip, base.grad_mode),
        eps_max=sec.get("eps_max", float, base.eps_max),
        n_coarse=sec.get("n_coarse", int, base.n_coarse),
        n_fine=sec.get("n_fine", int, base.n_fine),
        weights=_stage_weights(sec, base.weights))


def parse_run_config(text: str) -> RunConfig:
    """Parse INI text into a validated RunConfig; reject anything unknown."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax error: {e}") from e
    if cp.defaults():
        raise ConfigError("[DEFAULT] section is not supported")
    for name in cp.sections():
        if name not in _SECTIONS:
            known = ", ".join(_SECTIONS)
            raise ConfigError(f"unknown section [{name}] (known: {known})")
        for key in cp[name]:
            if key not in _SECTIONS[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
    for name in _SECTIONS:
        if not cp.has_section(name):
            cp.add_section(name)

    run = _Section(cp, "run")
    if run.has("scene") and run.has("dataset"):
        raise ConfigError("[run] scene conflicts with dataset; give one")
    dataset_path = run.get("dataset", str.strip, None)
    scene = None if dataset_path else run.get("scene", str.strip,
                                              "sphere-checker")
    fld = _Section(cp, "field")
    sch = _Section(cp, "schedule")
    ev = _Section(cp, "eval")
    seed = run.get("seed", int, 7)
    try:
        field_cfg = FieldConfig(
            n_levels=fld.get("n_levels", int, FieldConfig.n_levels),
            r_min=fld.get("r_min", int, FieldConfig.r_min),
            r_max=fld.get("r_max", int, FieldConfig.r_max),
            channels=fld.get("channels", int, FieldConfig.channels),
            geo_width=fld.get("geo_width", int, FieldConfig.geo_width),
            geo_depth=fld.get("geo_depth", int, FieldConfig.geo_depth),
            feat_dim=fld.get("feat_dim", int, FieldConfig.feat_dim),
            color_width=fld.get("color_width", int, FieldConfig.color_width),
            color_depth=fld.get("color_depth", int, FieldConfig.color_depth),
            condition_on_normal=fld.get("condition_on_normal", _parse_bool,
                                        FieldConfig.condition_on_normal))
        sched = ScaleSchedule(
            s_coarse_bound=sch.get("s_coarse_bound", float,
                                   ScaleSchedule.s_coarse_bound),
            s_fine_target=sch.get("s_fine_target", float,
                                  ScaleSchedule.s_fine_target),
            fine_ramp_steps=sch.get("fine_ramp_steps", int,
                                    ScaleSchedule.fine_ramp_steps))
        return RunConfig(
            scene=scene, dataset_path=dataset_path,
            output_dir=run.get("output_dir", str.strip, "out"),
            seed=seed,
            n_views=run.get("views", int, 16),
            view_radius=run.get("view_radius", float, 1.8),
            view_resolution=run.get("view_resolution", int, 64),
            field=field_cfg,
            init_radius=fld.get("init_radius", float, 0.3),
            schedule=sched,
            stage1=_stage_from(_Section(cp, "stage1"), stage1_config,
                               seed, sched),
            stage2=_stage_from(_Section(cp, "stage2"), stage2_config,
                               seed + 1, sched),
            eval=EvalConfig(
                mc_resolution=ev.get("mc_resolution", int,
                                     EvalConfig.mc_resolution),
                fscore_threshold=ev.get("fscore_threshold", float,
                                        EvalConfig.fscore_threshold),
                n_metric_points=ev.get("n_metric_points", int,
                                       EvalConfig.n_metric_points)))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def read_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r") as fh:
            text = fh.read()
    except OSError as e:
        raise IoError(f"cannot read config {path}: {e}") from e
    return parse_run_config(text)


def emit_run_config(cfg: RunConfig) -> str:
    """Normal form: every key explicit, canonical order, exact floats."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    run = {}
    if cfg.dataset_path is not None:
        run["dataset"] = cfg.dataset_path
    else:
        run["scene"] = cfg.scene
    run.update(output_dir=cfg.output_dir, seed=_fmt(cfg.seed),
               views=_fmt(cfg.n_views), view_radius=_fmt(cfg.view_radius),
               view_resolution=_fmt(cfg.view_resolution))
    cp["run"] = run
    f = cfg.field
    cp["field"] = {k: _fmt(getattr(f, k)) for k in _FIELD_KEYS[:-1]}
    cp["field"]["init_radius"] = _fmt(cfg.init_radius)
    cp["schedule"] = {k: _fmt(getattr(cfg.schedule, k))
                      for k in _SCHEDULE_KEYS}
    for name, st in (("stage1", cfg.stage1), ("stage2", cfg.stage2)):
        sec = dict(n_steps=_fmt(st.n_steps), batch_rays=_fmt(st.batch_rays),
                   lr=_fmt(st.lr), lr_decay=_fmt_lr_decay(st.lr_decay),
                   grad_mode=st.grad_mode, eps_max=_fmt(st.eps_max),
                   n_coarse=_fmt(st.n_coarse), n_fine=_fmt(st.n_fine))
        w = st.weights
        sec["lambda_eik"] = _fmt(w.lambda_eik)
        sec["lambda_smooth"] = _fmt(w.lambda_smooth)
        if isinstance(w.lambda_bias, BiasRamp):
            sec["bias_ramp_lo"] = _fmt(w.lambda_bias.lo)
            sec["bias_ramp_hi"] = _fmt(w.lambda_bias.hi)
            sec["bias_ramp_steps"] = _fmt(w.lambda_bias.steps)
        else:
            sec["lambda_bias"] = _fmt(float(w.lambda_bias))
        if w.eps_bias is not None:
            sec["eps_bias"] = _fmt(w.eps_bias)
        sec["eps_bias_mask"] = _fmt(w.eps_bias_mask)
        sec["eps_smooth"] = _fmt(w.eps_smooth)
        cp[name] = sec
    cp["eval"] = {k: _fmt(getattr(cfg.eval, k)) for k in _EVAL_KEYS}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def write_run_config(cfg: RunConfig, path: str):
    try:
        with open(path, "w") as fh:
            fh.write(emit_run_config(cfg))
    except OSError as e:
        raise IoError(f"cannot write config {path}: {e}") from e
