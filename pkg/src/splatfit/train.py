"""Joint camera + Gaussian fitting.

The loop per step: draw a view count, pick that many views, render them,
evaluate the stage loss, drop outlier views with the 3-sigma filter, zero
gradients that the progressive schedule freezes, take an Adam step and
re-center the cloud on the origin.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import geometry as geo
from . import losses
from .grad import GradientSet, backward_render
from .render import GaussianCloud, RenderOptions, activate_opacity, activate_scale, rasterize

log = logging.getLogger(__name__)

FOV_MIN = math.radians(10.0)
FOV_MAX = math.radians(170.0)


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.00016
    warmup_steps: int = 0
    total_steps: int = 1000

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at(sched: Schedule, step) -> float:
    """Linear warmup from 0.1x to 1x, then cosine decay to 0.01x at ``total_steps``."""
    step = min(max(step, 0), sched.total_steps)
    lr = sched.base_lr
    if step < sched.warmup_steps:
        return lr * (0.1 + 0.9 * step / sched.warmup_steps)
    span = sched.total_steps - sched.warmup_steps
    lo = 0.01 * lr
    if span == 0:
        # warmup fills the whole run; the final step still lands on the floor
        return lo
    progress = (step - sched.warmup_steps) / span
    return lo + 0.5 * (lr - lo) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    base_lr: float = 0.00016
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OptimState":
        return OptimState(
            self.base_lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step,
            {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
        )


QUATERNION_PARAMS = ("rotation", "cam_quat")


def optimizer_step(state: OptimState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr):
    """One bias-corrected Adam(W) step; returns new parameter arrays.

    ``lr`` is a float or a per-parameter dict. Quaternion parameters are
    renormalized afterwards. ``state`` is updated in place.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name!r} ({bad} entries)")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        rate = lr[name] if isinstance(lr, dict) else lr
        new = p - rate * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            new = new - rate * state.weight_decay * p
        if name in QUATERNION_PARAMS:
            new = new / np.linalg.norm(new, axis=-1, keepdims=True)
        out[name] = new
    return out


# ---------------------------------------------------------------------------
# View sampling and gradient filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewSamplerConfig:
    max_views: int = 4
    decay: float = 0.5

    def __post_init__(self):
        if self.max_views < 1:
            raise ValueError("max_views must be >= 1")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")


def view_count_probs(cfg: ViewSamplerConfig):
    """Normalized ``exp(-decay (v - 1))`` for ``v = 1..max_views``."""
    v = np.arange(1, cfg.max_views + 1)
    w = np.exp(-cfg.decay * (v - 1))
    return w / w.sum()


def sample_view_count(cfg: ViewSamplerConfig, rng: np.random.Generator) -> int:
    return int(rng.choice(cfg.max_views, p=view_count_probs(cfg))) + 1


def gradient_filter_mask(window) -> np.ndarray:
    """Keep entries strictly inside mean +- 3 population std of ``window``.

    Evaluated in exact rational arithmetic so boundary cases are decided
    consistently. A window with zero spread keeps everything.
    """
    vals = [Fraction(float(x)) for x in window]
    if not vals:
        raise ValueError("empty filter window")
    n = len(vals)
    mean = sum(vals) / n
    var = sum((x - mean) ** 2 for x in vals) / n
    if var == 0:
        return np.ones(n, dtype=bool)
    return np.array([(x - mean) ** 2 < 9 * var for x in vals], dtype=bool)


# ---------------------------------------------------------------------------
# Progressive spherical optimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhasePlan:
    """Radius only for ``step < angles_from``; radius and both angles afterwards."""

    angles_from: int = 0

    def __post_init__(self):
        if self.angles_from < 0:
            raise ValueError("phase threshold must be non-negative")


def progressive_mask(plan: PhasePlan, step) -> np.ndarray:
    """Trainable flags for ``(r, theta, phi)``."""
    if step < plan.angles_from:
        return np.array([True, False, False])
    return np.array([True, True, True])


def recenter(position_sph, radial_only=False):
    """Move the cloud so its mean Cartesian position is the origin.

    With ``radial_only`` the angles are left untouched and the smallest
    change of the radii that zeroes the mean is applied instead of a
    translation.
    """
    if radial_only:
        sph = position_sph.copy()
        dirs = geo.spherical_to_cartesian(np.column_stack([np.ones(len(sph)), sph[:, 1:]]))
        total = dirs.T @ sph[:, 0]
        gram = dirs.T @ dirs
        delta = -dirs @ np.linalg.lstsq(gram, total, rcond=None)[0]
        sph[:, 0] = sph[:, 0] + delta
        return sph
    means = geo.spherical_to_cartesian(position_sph)
    return geo.cartesian_to_spherical(means - means.mean(axis=0))


# ---------------------------------------------------------------------------
# Decoding network-style raw outputs
# ---------------------------------------------------------------------------

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def decode_raw_gaussian(anchor, offset, scale_raw, opacity_raw, color, rotation_raw, max_offset=0.1):
    """Activated attributes from raw offsets around an anchor position.

    Args:
        anchor: ``(..., 3)`` anchor position (Cartesian).
        offset: ``(..., 3)`` position offset; clamped to ``max_offset`` length.
        scale_raw, opacity_raw: offsets from the scale/opacity biases.
        color: SH coefficients, passed through.
        rotation_raw: ``(..., 4)`` offset from the identity quaternion.

    Returns a dict with ``means``, ``scales``, ``opacities``, ``rotations``, ``sh``.
    """
    offset = np.asarray(offset, dtype=np.float64)
    length = np.linalg.norm(offset, axis=-1, keepdims=True)
    factor = np.where(length > max_offset, max_offset / np.where(length > 0, length, 1.0), 1.0)
    return dict(
        means=np.asarray(anchor, dtype=np.float64) + offset * factor,
        scales=activate_scale(scale_raw),
        opacities=activate_opacity(opacity_raw),
        rotations=geo.quat_normalize(np.asarray(rotation_raw, dtype=np.float64) + IDENTITY_QUAT),
        sh=np.asarray(color, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

GEOMETRY_PARAMS = ("position_sph", "scale_raw", "rotation", "opacity_raw", "sh")
CAMERA_PARAMS = ("cam_quat", "cam_trans", "cam_fov")

DEFAULT_LR_SCALE = {
    "position_sph": 100.0,
    "scale_raw": 60.0,
    "rotation": 30.0,
    "opacity_raw": 250.0,
    "sh": 60.0,
    "metric_extent": 60.0,
    "cam_quat": 10.0,
    "cam_trans": 10.0,
    "cam_fov": 5.0,
}


@dataclass
class TrainConfig:
    """Hyperparameters of :func:`fit_scene`.

    Per-parameter learning rates are ``lr_at(schedule) * lr_scale[name]``.
    """

    stage: int = 1
    steps: int = 300
    base_lr: float = 0.00016
    warmup_steps: int = 20
    lr_scale: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR_SCALE))
    max_views: int = 4
    view_decay: float = 0.5
    filter_enabled: bool = True
    filter_window: int = 32
    filter_on: str = "loss"  # or "grad_norm"
    angles_from: int = 0
    train_geometry: bool = True
    train_cameras: Optional[bool] = None  # default: stage 2 only
    train_fov: bool = True
    recenter: bool = True
    safeguard: bool = False
    background: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.filter_on not in ("loss", "grad_norm"):
            raise ValueError(f"filter_on must be 'loss' or 'grad_norm', got {self.filter_on!r}")
        unknown = set(self.lr_scale) - set(DEFAULT_LR_SCALE)
        if unknown:
            raise ValueError(f"unknown lr_scale keys: {sorted(unknown)}")
        self.lr_scale = {**DEFAULT_LR_SCALE, **self.lr_scale}
        self.background = tuple(self.background)

    @property
    def schedule(self):
        return Schedule(self.base_lr, min(self.warmup_steps, self.steps), self.steps)

    @property
    def cameras_trainable(self):
        return self.stage == 2 if self.train_cameras is None else self.train_cameras

    def to_dict(self):
        d = asdict(self)
        d["background"] = list(self.background)
        return d


@dataclass
class FitResult:
    cloud: GaussianCloud
    cameras: List[geo.Camera]
    history: List[dict]
    diverged: bool = False


def _cloud_params(cloud: GaussianCloud):
    p = {name: getattr(cloud, name).copy() for name in GEOMETRY_PARAMS}
    if cloud.metric_extent is not None:
        p["metric_extent"] = cloud.metric_extent.copy()
    return p


def _camera_params(cams):
    return dict(
        cam_quat=np.stack([c.quat for c in cams]),
        cam_trans=np.stack([c.trans for c in cams]),
        cam_fov=np.stack([c.fov for c in cams]),
    )


def _build(params, template_cams):
    cloud = GaussianCloud(
        params["position_sph"], params["scale_raw"], params["rotation"],
        params["opacity_raw"], params["sh"], params.get("metric_extent"),
    )
    cams = [
        c.replace(quat=params["cam_quat"][i], trans=params["cam_trans"][i], fov=params["cam_fov"][i])
        for i, c in enumerate(template_cams)
    ]
    return cloud, cams


def _evaluate_views(cloud, cams, targets, view_ids, cfg: TrainConfig, gt_cams, gt_box, opts):
    """Render the chosen views; return (breakdown, per-view GradientSets, renders)."""
    outs = [rasterize(cloud, cams[i], opts) for i in view_ids]
    views = [(o.rgb, targets[i]) for o, i in zip(outs, view_ids)]
    bd = losses.stage_loss(
        cfg.stage, views, [cams[i] for i in view_ids], cloud,
        gt_cams=None if gt_cams is None else [gt_cams[i] for i in view_ids],
        gt_box=gt_box, with_grad=True,
    )
    per_view = [backward_render(cloud, cams[i], o, g) for o, i, g in zip(outs, view_ids, bd.image_grads)]
    return bd, per_view, outs


def _total_loss_and_grad(cloud, cams, targets, view_ids, cfg, gt_cams, gt_box, opts, filt_window):
    bd, per_view, outs = _evaluate_views(cloud, cams, targets, view_ids, cfg, gt_cams, gt_box, opts)
    n = len(view_ids)
    scores = bd.per_view if cfg.filter_on == "loss" else [g.norm() for g in per_view]
    if cfg.filter_enabled and np.all(np.isfinite(scores)):
        filt_window.extend(scores)
        window = list(filt_window)
        mask = gradient_filter_mask(window)[len(window) - n :]
    else:
        mask = np.ones(n, dtype=bool)
    if not mask.all():
        bd = losses.stage_loss(
            cfg.stage, [(o.rgb, targets[i]) for o, i in zip(outs, view_ids)],
            [cams[i] for i in view_ids], cloud,
            gt_cams=None if gt_cams is None else [gt_cams[i] for i in view_ids],
            gt_box=gt_box, mask=mask, with_grad=True,
        )
    kept = max(int(mask.sum()), 1)

    g_cloud = {name: np.zeros_like(getattr(cloud, name)) for name in GEOMETRY_PARAMS}
    g_cam = {k: np.zeros((len(cams),) + v.shape[1:]) for k, v in _camera_params(cams).items()}
    for j, (i, g) in enumerate(zip(view_ids, per_view)):
        if not mask[j]:
            continue
        for name in GEOMETRY_PARAMS:
            g_cloud[name] += getattr(g, name) / kept
        g_cam["cam_quat"][i] += g.cam_quat / kept
        g_cam["cam_trans"][i] += g.cam_trans / kept
        g_cam["cam_fov"][i] += g.cam_fov / kept
    if bd.reg_grads is not None:
        g_cloud["opacity_raw"] += bd.reg_grads[0]
        g_cloud["scale_raw"] += bd.reg_grads[1]
    if bd.cam_grads is not None:
        for j, i in enumerate(view_ids):
            for k, v in bd.cam_grads[j].items():
                g_cam[k][i] += v
    grads = dict(g_cloud)
    grads.update(g_cam)
    if bd.extent_grad is not None:
        grads["metric_extent"] = bd.extent_grad
    psnr = float(np.mean([losses.psnr(o.rgb, targets[i]) for o, i in zip(outs, view_ids)]))
    return bd, grads, mask, psnr


def fit_scene(
    targets: Sequence[np.ndarray],
    cameras: Sequence[geo.Camera],
    init_cloud: GaussianCloud,
    cfg: TrainConfig,
    gt_cameras: Optional[Sequence[geo.Camera]] = None,
    gt_box=None,
    callback=None,
) -> FitResult:
    """Fit a Gaussian cloud (and optionally cameras) to target images.

    Args:
        targets: ``(H, W, 3)`` RGB target per view (RGBA is accepted and the
            alpha channel dropped).
        cameras: initial camera per view (ground truth in stage 1, a
            perturbed guess in stage 2).
        init_cloud: starting cloud.
        cfg: training configuration.
        gt_cameras, gt_box: stage-1 supervision.
        callback: optional ``f(record)`` called after every step.

    Returns final cloud, cameras and the per-step history. On a non-finite
    loss the loop stops and returns the last good state with
    ``diverged=True``.
    """
    if len(targets) == 0 or len(targets) != len(cameras):
        raise ValueError("need at least one target image and one camera per image")
    targets = [np.asarray(t, dtype=np.float64)[..., :3] for t in targets]
    if cfg.stage == 1:
        gt_cameras = list(cameras) if gt_cameras is None else list(gt_cameras)
        if gt_box is None:
            gt_box = init_cloud.metric_extent if init_cloud.metric_extent is not None else np.ones(3)
        if init_cloud.metric_extent is None:
            init_cloud = init_cloud.replace(metric_extent=np.asarray(getattr(gt_box, "extent", gt_box)))
    else:
        gt_cameras, gt_box = None, None

    rng = np.random.default_rng(cfg.seed)
    opts = RenderOptions(background=cfg.background)
    sampler = ViewSamplerConfig(min(cfg.max_views, len(targets)), cfg.view_decay)
    plan = PhasePlan(cfg.angles_from)
    sched = cfg.schedule
    state = OptimState(base_lr=cfg.base_lr)
    filt_window = deque(maxlen=max(cfg.filter_window, 1))

    params = _cloud_params(init_cloud)
    params.update(_camera_params(cameras))
    trainable = set()
    if cfg.train_geometry:
        trainable |= set(GEOMETRY_PARAMS)
    if cfg.stage == 1 and "metric_extent" in params:
        trainable.add("metric_extent")
    if cfg.cameras_trainable:
        trainable |= {"cam_quat", "cam_trans"} | ({"cam_fov"} if cfg.train_fov else set())

    history: List[dict] = []
    lr_factor = 1.0
    prev_total = None
    all_views = np.arange(len(targets))
    step = 0
    while step < cfg.steps:
        cloud, cams = _build(params, cameras)
        if cfg.safeguard:
            view_ids = all_views
        else:
            v = sample_view_count(sampler, rng)
            view_ids = np.sort(rng.choice(len(targets), size=v, replace=False))
        bd, grads, mask, psnr = _total_loss_and_grad(
            cloud, cams, targets, view_ids, cfg, gt_cameras, gt_box, opts, filt_window
        )
        if not math.isfinite(bd.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            log.warning("non-finite loss at step %d; stopping", step)
            return FitResult(cloud, cams, history, diverged=True)

        if cfg.safeguard and prev_total is not None and bd.total > prev_total:
            # reject the last step and retry it with half the learning rate
            params, state = saved_params, saved_state
            lr_factor *= 0.5
            if lr_factor < 1e-8:
                break
            continue

        record = dict(
            step=step, lr=lr_at(sched, step) * lr_factor, views=[int(i) for i in view_ids],
            mask=[bool(m) for m in mask], psnr=psnr, **{k: v for k, v in bd.to_dict().items()},
        )
        history.append(record)
        if callback is not None:
            callback(record)
        prev_total = bd.total

        sph_mask = progressive_mask(plan, step)
        grads["position_sph"] = grads["position_sph"] * sph_mask
        step_grads = {k: g for k, g in grads.items() if k in trainable}
        base = lr_at(sched, step) * lr_factor
        lrs = {k: base * cfg.lr_scale[k] for k in step_grads}
        saved_params = {k: v.copy() for k, v in params.items()}
        saved_state = state.copy()
        sub = {k: params[k] for k in step_grads}
        params.update(optimizer_step(state, sub, step_grads, lrs))
        if "cam_fov" in step_grads:
            params["cam_fov"] = np.clip(params["cam_fov"], FOV_MIN, FOV_MAX)
        if cfg.recenter and "position_sph" in step_grads:
            params["position_sph"] = recenter(params["position_sph"], radial_only=not sph_mask[1])
        step += 1

    cloud, cams = _build(params, cameras)
    return FitResult(cloud, cams, history)


# ---------------------------------------------------------------------------
# Harmonization
# ---------------------------------------------------------------------------

@dataclass
class HarmonizeConfig:
    steps: int = 200
    base_lr: float = 0.1
    warmup_steps: int = 10
    background: tuple = (1.0, 1.0, 1.0)


def harmonize(cloud: GaussianCloud, cams: Sequence[geo.Camera], targets: Sequence[np.ndarray], cfg: HarmonizeConfig = HarmonizeConfig()):
    """Fit additive SH color offsets so renders match ``targets``.

    Every other attribute is held fixed. Returns ``delta`` with the shape of
    ``cloud.sh``; the harmonized cloud is ``cloud.replace(sh=cloud.sh + delta)``.
    """
    if len(cams) != len(targets):
        raise ValueError("need one target per camera")
    targets = [np.asarray(t, dtype=np.float64)[..., :3] for t in targets]
    opts = RenderOptions(background=cfg.background)
    sched = Schedule(cfg.base_lr, min(cfg.warmup_steps, cfg.steps), cfg.steps)
    weights = losses.STAGE_WEIGHTS["harmonize"]
    state = OptimState(base_lr=cfg.base_lr)
    delta = np.zeros_like(cloud.sh)
    for step in range(cfg.steps):
        current = cloud.replace(sh=cloud.sh + delta)
        g_delta = np.zeros_like(delta)
        for cam, target in zip(cams, targets):
            out = rasterize(current, cam, opts)
            *_, g_img = losses.view_image_loss(out.rgb, target, weights, with_grad=True)
            g_delta += backward_render(current, cam, out, g_img).sh / len(cams)
        delta = optimizer_step(state, {"delta": delta}, {"delta": g_delta}, lr_at(sched, step))["delta"]
    return delta
