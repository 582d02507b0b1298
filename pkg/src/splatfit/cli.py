"""Command-line entry point.

Usage::

    splatfit gen --out data/ --views 8 --seed 1
    splatfit fit --dataset data/ --out run/ --stage 1
    splatfit render --cloud run/cloud.json --cameras data/cameras.json --out renders/
    splatfit eval --pred run/ --gt data/ --out report/ [--metric-scale]
    splatfit gradcheck --out gc/ [--tol 1e-4]
    splatfit sample-cameras --views 128 --out cams/

Every command reads an optional JSON config (``--config``), applies flag
overrides on top, validates the result and all referenced paths, and only
then starts work. The resolved config (without ``out``) is written to
``config.json`` in the output directory, so ``--config out/config.json
--out other/`` reproduces the run.

Exit codes: 0 success, 1 validation error, 2 numerical failure (divergence
or gradcheck breach). Errors are printed to stderr as one JSON record per
line with ``error``, ``field`` and ``message`` keys.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import losses, synth
from .grad import gradcheck
from .render import GaussianCloud, RenderOptions, rasterize
from .train import DEFAULT_LR_SCALE, TrainConfig, fit_scene

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2

COMMANDS = ("gen", "render", "fit", "gradcheck", "eval", "sample-cameras")


def _train_defaults():
    d = TrainConfig().to_dict()
    d.pop("seed")
    d.pop("background")
    return d


def _orbit_defaults():
    d = {f.name: f.default for f in fields(synth.OrbitConfig)}
    # seed and resolution live at the top level; views_per_orbit follows from "views"
    for k in ("seed", "resolution", "views_per_orbit"):
        d.pop(k)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


DEFAULTS = {
    "seed": 0,
    "resolution": 64,
    "views": 8,
    "deterministic": True,
    "paths": {"dataset": None, "cloud": None, "cameras": None, "pred": None, "gt": None, "init": None},
    "scene": {"gaussians": 48, "style": "blob", "sh_degree": 0, "metric_extent": [4.5, 1.8, 1.5]},
    "orbit": dict(_orbit_defaults(), orbits=1),
    "train": _train_defaults(),
    "fit": {
        "init_noise": 0.05,
        "init_scale": 0.05,
        "init_opacity": 0.5,
        "perturb_rot_deg": 5.0,
        "perturb_trans_frac": 0.05,
    },
    "render": {"background": [1.0, 1.0, 1.0]},
    "gradcheck": {"tol": 1e-4, "h": 1e-5},
    "metrics": {"metric_scale": False},
}

# sections whose keys are free-form dicts (not checked key by key)
_OPEN_SECTIONS = {("train", "lr_scale")}

REQUIRED_PATHS = {
    "gen": (),
    "render": ("cloud",),
    "fit": ("dataset",),
    "gradcheck": (),
    "eval": ("pred", "gt"),
    "sample-cameras": (),
}


class ConfigError(Exception):
    """Validation failure with the offending field (dotted path)."""

    def __init__(self, field, message, **extra):
        super().__init__(message)
        self.field = field
        self.message = message
        self.extra = extra

    def record(self):
        return dict(error="validation", field=self.field, message=self.message, **self.extra)


class NumericalFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def _merge(base, update, prefix=""):
    """Recursively overlay ``update`` on ``base``, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(name, f"unknown key {name!r}", known=sorted(base))
        path = tuple(name.split("."))
        if isinstance(base[key], dict) and path not in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(name, f"{name!r} must be an object")
            out[key] = _merge(base[key], value, name + ".")
        elif path in _OPEN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(name, f"{name!r} must be an object")
            out[key] = {**base[key], **value}
        else:
            out[key] = value
    return out


def _set_dotted(cfg, dotted, value):
    update = value
    for part in reversed(dotted.split(".")):
        update = {part: update}
    return _merge(cfg, update)


def load_config_file(path):
    """Parse a JSON config file into a nested dict (no defaults applied)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"config file not found: {path}")
    text = path.read_text()
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: {exc.msg}", line=exc.lineno, column=exc.colno) from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path}: top level must be an object")
    return data


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> dict:
    """Defaults, then the config file, then flags (last wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = _merge(cfg, load_config_file(args.config))
    overrides = {
        "seed": args.seed,
        "resolution": args.resolution,
        "views": args.views,
        "deterministic": args.deterministic,
        "train.stage": args.stage,
        "train.steps": args.steps,
        "train.base_lr": args.base_lr,
        "gradcheck.tol": args.tol,
        "metrics.metric_scale": True if args.metric_scale else None,
    }
    for name in ("dataset", "cloud", "cameras", "pred", "gt", "init"):
        overrides[f"paths.{name}"] = getattr(args, name)
    for dotted, value in overrides.items():
        if value is not None:
            cfg = _set_dotted(cfg, dotted, value)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError("set", f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = _set_dotted(cfg, key.strip(), _parse_scalar(value))
    return cfg


def _check_int(cfg, key, lo):
    val = cfg[key]
    if not isinstance(val, int) or isinstance(val, bool) or val < lo:
        raise ConfigError(key, f"{key} must be an integer >= {lo}, got {val!r}")


def _check_types(section, values, defaults):
    """Numbers must stay numbers and flags must stay booleans."""
    for key, default in defaults.items():
        val = values[key]
        if isinstance(default, bool):
            ok = isinstance(val, bool)
        elif isinstance(default, (int, float)):
            ok = isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val)
            if ok and isinstance(default, int) and not isinstance(val, int):
                ok = False
        else:
            continue
        if not ok:
            raise ConfigError(f"{section}.{key}", f"{section}.{key} must be of type {type(default).__name__}, got {val!r}")


def build_train_config(cfg) -> TrainConfig:
    train = dict(cfg["train"])
    try:
        return TrainConfig(**train, seed=cfg["seed"], background=tuple(cfg["render"]["background"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None


def build_orbit_config(cfg) -> synth.OrbitConfig:
    orbit = dict(cfg["orbit"])
    views = cfg["views"]
    if not isinstance(orbit["orbits"], int) or orbit["orbits"] < 1:
        raise ConfigError("orbit.orbits", "orbits must be an integer >= 1")
    orbit["views_per_orbit"] = math.ceil(views / orbit["orbits"])
    try:
        return synth.OrbitConfig(**orbit, resolution=cfg["resolution"], seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("orbit", str(exc)) from None


def validate(command, cfg, out):
    """Check value types and referenced paths before any work starts."""
    _check_int(cfg, "seed", 0)
    _check_int(cfg, "resolution", 1)
    _check_int(cfg, "views", 1)
    if not isinstance(cfg["deterministic"], bool):
        raise ConfigError("deterministic", "deterministic must be true or false")
    bg = cfg["render"]["background"]
    if not (isinstance(bg, list) and len(bg) == 3 and all(isinstance(v, (int, float)) for v in bg)):
        raise ConfigError("render.background", "background must be a list of three numbers")
    tol = cfg["gradcheck"]["tol"]
    if not isinstance(tol, (int, float)) or tol <= 0:
        raise ConfigError("gradcheck.tol", "tol must be a positive number")
    if cfg["scene"]["style"] not in ("blob", "shell"):
        raise ConfigError("scene.style", "style must be 'blob' or 'shell'")
    if cfg["scene"]["sh_degree"] not in (0, 1):
        raise ConfigError("scene.sh_degree", "sh_degree must be 0 or 1")
    _check_int(cfg["scene"], "gaussians", 1)
    _check_types("train", cfg["train"], DEFAULTS["train"])
    _check_types("fit", cfg["fit"], DEFAULTS["fit"])
    unknown_lr = set(cfg["train"]["lr_scale"]) - set(DEFAULT_LR_SCALE)
    if unknown_lr:
        raise ConfigError("train.lr_scale", f"unknown lr_scale keys {sorted(unknown_lr)}")
    build_train_config(cfg)
    build_orbit_config(cfg)
    if out is None:
        raise ConfigError("out", "--out is required")
    for name in REQUIRED_PATHS[command]:
        if cfg["paths"][name] is None:
            raise ConfigError(f"paths.{name}", f"{command} needs --{name}")
    for name, value in cfg["paths"].items():
        if value is not None and not Path(value).exists():
            raise ConfigError(f"paths.{name}", f"path does not exist: {value}")
    if command == "fit":
        ds = Path(cfg["paths"]["dataset"])
        if not (ds / "cameras.json").is_file() or not (ds / "images").is_dir():
            raise ConfigError("paths.dataset", f"{ds} is not a dataset directory (cameras.json, images/)")
    if command == "eval":
        for name in ("pred", "gt"):
            if not (Path(cfg["paths"][name]) / "cloud.json").is_file():
                raise ConfigError(f"paths.{name}", f"{cfg['paths'][name]} has no cloud.json")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _render_opts(cfg):
    return RenderOptions(background=tuple(cfg["render"]["background"]), deterministic=cfg["deterministic"])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _sample_cameras(cfg):
    return synth.sample_orbit_cameras(build_orbit_config(cfg))[: cfg["views"]]


def cmd_gen(cfg, out):
    sc = cfg["scene"]
    cloud = synth.make_synthetic_cloud(
        sc["gaussians"], seed=cfg["seed"], style=sc["style"], sh_degree=sc["sh_degree"],
        metric_extent=sc["metric_extent"],
    )
    ds = synth.render_dataset(cloud, _sample_cameras(cfg), opts=_render_opts(cfg))
    synth.save_dataset(ds, out, meta={"seed": cfg["seed"]})
    return {"views": len(ds), "gaussians": len(cloud)}


def cmd_sample_cameras(cfg, out):
    cams = _sample_cameras(cfg)
    synth.save_cameras(cams, out / "cameras.json")
    return {"views": len(cams)}


def cmd_render(cfg, out):
    cloud = synth.load_cloud(cfg["paths"]["cloud"])
    if cfg["paths"]["cameras"]:
        cams = synth.load_cameras(cfg["paths"]["cameras"])
    else:
        cams = _sample_cameras(cfg)
    ds = synth.render_dataset(cloud, cams, opts=_render_opts(cfg))
    synth.save_images(ds.images, out / "images")
    synth.save_cameras(ds.cameras, out / "cameras.json")
    return {"views": len(ds)}


def _initial_cloud(cfg, ds: synth.Dataset, rng):
    """Starting cloud: ``paths.init`` if given, else the dataset cloud with
    jittered means and neutral appearance, else a random ball."""
    fc = cfg["fit"]
    if cfg["paths"]["init"]:
        return synth.load_cloud(cfg["paths"]["init"])
    n = cfg["scene"]["gaussians"]
    if ds.cloud is not None:
        n = len(ds.cloud)
        means = ds.cloud.means + rng.normal(scale=fc["init_noise"], size=(n, 3))
    else:
        d = rng.normal(size=(n, 3))
        means = 0.4 * d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(size=(n, 1)) ** (1 / 3)
    return GaussianCloud.from_activated(
        means, fc["init_scale"], [1.0, 0.0, 0.0, 0.0], fc["init_opacity"], colors=np.full((n, 3), 0.5)
    )


def cmd_fit(cfg, out):
    tc = build_train_config(cfg)
    ds = synth.load_dataset(cfg["paths"]["dataset"])
    if ds.cloud is not None and ds.metric_extent is not None and ds.cloud.metric_extent is None:
        ds.cloud = ds.cloud.replace(metric_extent=ds.metric_extent)
    rng = np.random.default_rng(cfg["seed"])
    if tc.stage == 2 and ds.cloud is not None and not tc.train_geometry:
        init = ds.cloud
    else:
        init = _initial_cloud(cfg, ds, rng)
    if cfg["paths"]["cameras"]:
        cams = synth.load_cameras(cfg["paths"]["cameras"])
        if len(cams) != len(ds):
            raise ConfigError("paths.cameras", f"{len(cams)} cameras for {len(ds)} images")
    elif tc.stage == 2:
        fc = cfg["fit"]
        cams = synth.perturb_cameras(ds.cameras, fc["perturb_rot_deg"], fc["perturb_trans_frac"], seed=cfg["seed"])
    else:
        cams = ds.cameras
    gt_box = None
    if tc.stage == 1:
        gt_box = ds.metric_extent if ds.metric_extent is not None else geo.compute_bbox(init.means).extent
        if init.metric_extent is None:
            init = init.replace(metric_extent=np.asarray(gt_box, dtype=np.float64))

    with open(out / "history.jsonl", "w") as fh:
        def log_record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        result = fit_scene(ds.rgb, cams, init, tc, gt_cameras=ds.cameras, gt_box=gt_box, callback=log_record)
    synth.save_cloud(result.cloud, out / "cloud.json")
    synth.save_cameras(result.cameras, out / "cameras.json")
    last = result.history[-1] if result.history else {}
    summary = {"steps": len(result.history), "diverged": result.diverged, "final_psnr": last.get("psnr")}
    if result.diverged:
        raise NumericalFailure(f"fit diverged after {len(result.history)} steps")
    return summary


def gradcheck_fixture(seed=0):
    """The bundled 4-Gaussian scene: degree-1 SH, one camera at 32x32."""
    rng = np.random.default_rng(seed)
    n = 4
    means = rng.uniform(-0.25, 0.25, size=(n, 3))
    q = rng.normal(size=(n, 4))
    sh = rng.normal(scale=0.3, size=(n, 4, 3))
    sh[:, 0] = rng.uniform(0.3, 0.8, size=(n, 3)) / geo.SH_C0
    cloud = GaussianCloud.from_activated(
        means, rng.uniform(0.05, 0.12, size=(n, 3)), geo.quat_normalize(q), rng.uniform(0.4, 0.9, size=n), sh=sh
    )
    cam = geo.Camera.look_at([1.4, 0.3, 0.5], [0.0, 0.0, 0.0], math.radians(60.0), 32, 32)
    return cloud, cam


def gradcheck_loss(shape, seed=0):
    """Fixed random linear functional of rgb and alpha (every pixel matters)."""
    rng = np.random.default_rng(seed + 1)
    w_rgb = rng.uniform(-1, 1, size=shape + (3,))
    w_a = rng.uniform(-1, 1, size=shape)

    def loss(rgb, alpha):
        return float(np.sum(w_rgb * rgb) + np.sum(w_a * alpha)), w_rgb, w_a

    return loss


def cmd_gradcheck(cfg, out):
    cloud, cam = gradcheck_fixture(cfg["seed"])
    if cfg["paths"]["cloud"]:
        cloud = synth.load_cloud(cfg["paths"]["cloud"])
    if cfg["paths"]["cameras"]:
        cam = synth.load_cameras(cfg["paths"]["cameras"])[0]
    gc = cfg["gradcheck"]
    report = gradcheck(
        cloud, cam, gradcheck_loss((cam.height, cam.width), cfg["seed"]), tol=gc["tol"], h=gc["h"],
        opts=RenderOptions(background=tuple(cfg["render"]["background"])),
    )
    data = report.to_dict()
    _write_json(out / "gradcheck.json", data)
    if not report.passed:
        raise NumericalFailure(f"gradcheck failed for {report.failing()}")
    return {"passed": True, "max_rel_error": max(report.max_rel_error.values())}


def _eval_images(directory, gt_cams, opts):
    """Images of a prediction or ground-truth directory.

    Uses ``images/`` when present, else renders ``cloud.json`` under the
    ground-truth cameras.
    """
    directory = Path(directory)
    if (directory / "images").is_dir():
        return [img[..., :3] for img in synth.load_images(directory / "images")]
    cloud = synth.load_cloud(directory / "cloud.json")
    return [rasterize(cloud, c, opts).rgb for c in gt_cams]


def cmd_eval(cfg, out):
    pred_dir, gt_dir = Path(cfg["paths"]["pred"]), Path(cfg["paths"]["gt"])
    conv = losses.MetricConventions(metric_scale=bool(cfg["metrics"]["metric_scale"]))
    pred_cloud = synth.load_cloud(pred_dir / "cloud.json")
    gt_cloud = synth.load_cloud(gt_dir / "cloud.json")
    gt_cams = synth.load_cameras(gt_dir / "cameras.json") if (gt_dir / "cameras.json").is_file() else []
    opts = _render_opts(cfg)
    gt_images = _eval_images(gt_dir, gt_cams, opts) if gt_cams or (gt_dir / "images").is_dir() else []
    pred_images = _eval_images(pred_dir, gt_cams, opts) if gt_images else []
    if len(pred_images) != len(gt_images):
        raise ConfigError("paths.pred", f"{len(pred_images)} predicted images for {len(gt_images)} ground-truth views")
    pred_pts, gt_pts = pred_cloud.means, gt_cloud.means
    if conv.metric_scale:
        for name, cl in (("pred", pred_cloud), ("gt", gt_cloud)):
            if cl.metric_extent is None:
                raise ConfigError(f"paths.{name}", "metric-scale evaluation needs a metric_extent in cloud.json")
        pred_pts = losses.to_metric(pred_pts, pred_cloud.metric_extent)
        gt_pts = losses.to_metric(gt_pts, gt_cloud.metric_extent)
    metrics = losses.evaluate(pred_images, gt_images, pred_pts, gt_pts, conv)
    report = {
        "metrics": metrics,
        "conventions": {"cd_multiplier": conv.cd_multiplier, "f_score_tau": conv.tau, "units": conv.units},
        "views": len(gt_images),
    }
    _write_json(out / "report.json", report)
    return report


HANDLERS = {
    "gen": cmd_gen,
    "render": cmd_render,
    "fit": cmd_fit,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "sample-cameras": cmd_sample_cameras,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="splatfit", description="Gaussian splat fitting toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--stage", type=int, choices=(1, 2))
    parser.add_argument("--views", type=int)
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--base-lr", type=float)
    parser.add_argument("--tol", type=float)
    parser.add_argument("--metric-scale", action="store_true", help="report CD in meters and F-score at 0.05 m")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    for name in ("dataset", "cloud", "cameras", "pred", "gt", "init"):
        parser.add_argument(f"--{name}")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    return parser


def _emit_error(kind, message, **extra):
    print(json.dumps(dict(error=kind, message=message, **extra), sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    try:
        cfg = resolve_config(args)
        validate(args.command, cfg, args.out)
    except ConfigError as exc:
        print(json.dumps(exc.record(), sort_keys=True), file=sys.stderr)
        return EXIT_VALIDATION

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    try:
        summary = HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(json.dumps(exc.record(), sort_keys=True), file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalFailure, FloatingPointError) as exc:
        _emit_error("numerical", str(exc))
        return EXIT_NUMERICAL
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
