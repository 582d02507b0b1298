"""Image losses, camera/regularization losses, stage losses and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .render import GaussianCloud

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

LPIPS_UNAVAILABLE = "unavailable"


def _check_shapes(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# Photometric losses
# ---------------------------------------------------------------------------

def l1_loss(a, b):
    a, b = _check_shapes(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_loss_and_grad(a, b):
    a, b = _check_shapes(a, b)
    return float(np.mean(np.abs(a - b))), np.sign(a - b) / a.size


def mse_loss(a, b):
    a, b = _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def mse_loss_and_grad(a, b):
    a, b = _check_shapes(a, b)
    diff = a - b
    return float(np.mean(diff**2)), 2.0 * diff / a.size


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` if identical."""
    mse = mse_loss(a, b)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img, w):
    """Separable 'valid' correlation over the two leading axes."""
    k = len(w)
    h, wd = img.shape[:2]
    rows = sum(w[i] * img[i : h - k + 1 + i] for i in range(k))
    return sum(w[j] * rows[:, j : wd - k + 1 + j] for j in range(k))


def _filter_valid_adjoint(grad, w, shape):
    k = len(w)
    h, wd = shape[:2]
    rows = np.zeros((grad.shape[0], wd) + grad.shape[2:])
    for j in range(k):
        rows[:, j : wd - k + 1 + j] += w[j] * grad
    out = np.zeros(shape)
    for i in range(k):
        out[i : h - k + 1 + i] += w[i] * rows
    return out


def _ssim_terms(a, b):
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    w = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    s_aa = _filter_valid(a * a, w) - mu_a * mu_a
    s_bb = _filter_valid(b * b, w) - mu_b * mu_b
    s_ab = _filter_valid(a * b, w) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + c1
    num2 = 2 * s_ab + c2
    den1 = mu_a * mu_a + mu_b * mu_b + c1
    den2 = s_aa + s_bb + c2
    return w, mu_a, mu_b, num1, num2, den1, den2


def ssim(a, b):
    """Mean SSIM over all full 11x11 windows (Gaussian sigma 1.5) and channels."""
    a, b = _check_shapes(a, b)
    _, _, _, num1, num2, den1, den2 = _ssim_terms(a, b)
    return float(np.mean((num1 * num2) / (den1 * den2)))


def ssim_and_grad(a, b):
    """SSIM and its gradient with respect to ``a``."""
    a, b = _check_shapes(a, b)
    w, mu_a, mu_b, num1, num2, den1, den2 = _ssim_terms(a, b)
    smap = (num1 * num2) / (den1 * den2)
    g = np.full(smap.shape, 1.0 / smap.size)
    den = den1 * den2
    g_mu_a = g * (2 * mu_b * num2 / den - 2 * mu_b * num1 / den - smap * (2 * mu_a / den1 - 2 * mu_a / den2))
    g_ab = g * 2 * num1 / den
    g_aa = g * (-smap / den2)
    grad = (
        _filter_valid_adjoint(g_mu_a, w, a.shape)
        + b * _filter_valid_adjoint(g_ab, w, a.shape)
        + 2 * a * _filter_valid_adjoint(g_aa, w, a.shape)
    )
    return float(np.mean(smap)), grad


# ---------------------------------------------------------------------------
# Camera, scale and regularization losses
# ---------------------------------------------------------------------------

def rotation_loss(q, q_hat):
    """``min(|q - q_hat|_1, |q + q_hat|_1)``; invariant to the quaternion sign."""
    q = np.asarray(q, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    return float(min(np.abs(q - q_hat).sum(), np.abs(q + q_hat).sum()))


def camera_loss(cam: geo.Camera, cam_hat: geo.Camera):
    return (
        rotation_loss(cam.quat, cam_hat.quat)
        + float(np.abs(cam.trans - cam_hat.trans).sum())
        + float(np.abs(cam.fov - cam_hat.fov).sum())
    )


def camera_loss_grad(cam: geo.Camera, cam_hat: geo.Camera):
    """Subgradient of :func:`camera_loss` w.r.t. ``cam``'s (quat, trans, fov)."""
    minus = np.abs(cam.quat - cam_hat.quat).sum()
    plus = np.abs(cam.quat + cam_hat.quat).sum()
    g_q = np.sign(cam.quat - cam_hat.quat) if minus <= plus else np.sign(cam.quat + cam_hat.quat)
    return dict(
        cam_quat=g_q,
        cam_trans=np.sign(cam.trans - cam_hat.trans),
        cam_fov=np.sign(cam.fov - cam_hat.fov),
    )


def reg_loss(cloud: GaussianCloud):
    """Mean ``(opacity - 1)^2`` plus mean per-Gaussian largest scale."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    alpha = cloud.opacities
    return float(np.mean((alpha - 1.0) ** 2) + np.mean(cloud.scales.max(axis=1)))


def reg_loss_grad(cloud: GaussianCloud):
    """Gradients of :func:`reg_loss` w.r.t. ``opacity_raw`` and ``scale_raw``."""
    n = len(cloud)
    alpha = cloud.opacities
    g_opacity = 2.0 * (alpha - 1.0) / n * alpha * (1.0 - alpha)
    scales = cloud.scales
    g_scale = np.zeros_like(scales)
    rows = np.arange(n)
    cols = np.argmax(scales, axis=1)
    g_scale[rows, cols] = scales[rows, cols] / n
    return g_opacity, g_scale


def scale_loss(pred, gt):
    """Mean absolute error between two box extents."""
    p = np.asarray(getattr(pred, "extent", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "extent", gt), dtype=np.float64)
    return float(np.mean(np.abs(p - g)))


def scale_loss_grad(pred, gt):
    p = np.asarray(getattr(pred, "extent", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "extent", gt), dtype=np.float64)
    return np.sign(p - g) / 3.0


# ---------------------------------------------------------------------------
# Stage losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    ssim: float = 1.0
    mse: float = 0.0
    lpips: float = 0.0  # no LPIPS network ships with this package
    scale: float = 1.0
    cam: float = 1.0
    reg: float = 1.0


STAGE_WEIGHTS = {
    1: LossWeights(),
    2: LossWeights(scale=0.0, cam=0.0),
    "harmonize": LossWeights(l1=10.0, ssim=10.0, mse=10.0, scale=0.0, cam=0.0, reg=0.0),
}


@dataclass
class LossBreakdown:
    """Stage loss split into its terms.

    Image terms are means over the views that count (all views, or those
    kept by ``mask``). ``per_view`` holds each view's weighted image loss.
    """

    l1: float = 0.0
    ssim_loss: float = 0.0
    mse: float = 0.0
    lpips: object = LPIPS_UNAVAILABLE
    cam: float = 0.0
    scale: float = 0.0
    reg: float = 0.0
    total: float = 0.0
    per_view: List[float] = field(default_factory=list)
    weights: LossWeights = LossWeights()
    image_grads: Optional[list] = None
    cam_grads: Optional[list] = None
    reg_grads: Optional[tuple] = None
    extent_grad: Optional[np.ndarray] = None

    def components(self):
        w = self.weights
        return dict(
            l1=w.l1 * self.l1,
            ssim=w.ssim * self.ssim_loss,
            mse=w.mse * self.mse,
            scale=w.scale * self.scale,
            cam=w.cam * self.cam,
            reg=w.reg * self.reg,
        )

    def to_dict(self):
        return dict(
            l1=self.l1, ssim_loss=self.ssim_loss, mse=self.mse, lpips=self.lpips,
            cam=self.cam, scale=self.scale, reg=self.reg, total=self.total,
            per_view=list(self.per_view),
        )


def view_image_loss(render, target, weights: LossWeights, with_grad=False):
    """Weighted image loss of one view: returns (l1, 1 - ssim, mse, total[, grad])."""
    l1, g_l1 = l1_loss_and_grad(render, target)
    s, g_s = ssim_and_grad(render, target)
    mse, g_mse = mse_loss_and_grad(render, target)
    total = weights.l1 * l1 + weights.ssim * (1.0 - s) + weights.mse * mse
    if not with_grad:
        return l1, 1.0 - s, mse, total
    grad = weights.l1 * g_l1 - weights.ssim * g_s + weights.mse * g_mse
    return l1, 1.0 - s, mse, total, grad


def stage_loss(
    stage,
    views: Sequence,
    cams: Sequence[geo.Camera],
    cloud: GaussianCloud,
    gt_cams: Optional[Sequence[geo.Camera]] = None,
    gt_box=None,
    weights: Optional[LossWeights] = None,
    mask=None,
    with_grad=False,
) -> LossBreakdown:
    """Total training loss for stage 1, stage 2 or harmonization.

    Args:
        stage: ``1``, ``2`` or ``"harmonize"``.
        views: ``(render_rgb, target_rgb)`` pairs.
        cams: the cameras the renders were produced with.
        gt_cams, gt_box: required in stage 1 (camera and scale supervision);
            ignored otherwise.
        mask: optional per-view booleans; image terms average over kept views.
        with_grad: also fill ``image_grads`` (per-view ``dL_i/drgb``, not
            divided by the view count), ``cam_grads``, ``reg_grads`` and
            ``extent_grad``.
    """
    if stage not in STAGE_WEIGHTS:
        raise ValueError(f"unknown stage {stage!r}")
    w = weights if weights is not None else STAGE_WEIGHTS[stage]
    if stage == 1 and (gt_cams is None or gt_box is None):
        raise ValueError("stage 1 needs ground-truth cameras and box extent")
    n = len(views)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = LossBreakdown(weights=w)

    terms = [view_image_loss(r, t, w, with_grad) for r, t in views]
    out.per_view = [float(t[3]) for t in terms]
    kept = int(mask.sum())
    if kept:
        out.l1 = float(np.mean([t[0] for t, m in zip(terms, mask) if m]))
        out.ssim_loss = float(np.mean([t[1] for t, m in zip(terms, mask) if m]))
        out.mse = float(np.mean([t[2] for t, m in zip(terms, mask) if m]))
    if with_grad:
        out.image_grads = [t[4] for t in terms]

    if stage == 1 and w.cam:
        out.cam = float(np.mean([camera_loss(c, g) for c, g in zip(cams, gt_cams)])) if n else 0.0
        if with_grad:
            out.cam_grads = [
                {k: v * w.cam / n for k, v in camera_loss_grad(c, g).items()} for c, g in zip(cams, gt_cams)
            ]
    if stage == 1 and w.scale:
        if cloud.metric_extent is None:
            raise ValueError("stage 1 scale supervision needs cloud.metric_extent")
        out.scale = scale_loss(cloud.metric_extent, gt_box)
        if with_grad:
            out.extent_grad = w.scale * scale_loss_grad(cloud.metric_extent, gt_box)
    if w.reg:
        out.reg = reg_loss(cloud)
        if with_grad:
            g_op, g_sc = reg_loss_grad(cloud)
            out.reg_grads = (w.reg * g_op, w.reg * g_sc)
    out.total = float(sum(out.components().values()))
    return out


# ---------------------------------------------------------------------------
# Point-cloud metrics
# ---------------------------------------------------------------------------

def _points(a):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ValueError("point set is empty")
    return a


def nearest_distances(a, b):
    """Distance from every point of ``a`` to its nearest neighbour in ``b``."""
    a, b = _points(a), _points(b)
    d, _ = cKDTree(b).query(a, k=1)
    return d


def chamfer_distance(a, b):
    """Symmetric non-squared Chamfer distance, averaged over both directions."""
    return 0.5 * (float(nearest_distances(a, b).mean()) + float(nearest_distances(b, a).mean()))


def f_score(a, b, tau):
    """Harmonic mean of precision (``a`` near ``b``) and recall at threshold ``tau``."""
    if tau <= 0:
        raise ValueError("threshold must be positive")
    precision = float(np.mean(nearest_distances(a, b) < tau))
    recall = float(np.mean(nearest_distances(b, a) < tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricConventions:
    """How geometry metrics are reported.

    Normalized scenes report Chamfer distance x1e3 with F-score at 0.01;
    metric (meter) scenes report raw meters with F-score at 0.05.
    """

    metric_scale: bool = False

    @property
    def cd_multiplier(self):
        return 1.0 if self.metric_scale else 1e3

    @property
    def tau(self):
        return 0.05 if self.metric_scale else 0.01

    @property
    def units(self):
        return "m" if self.metric_scale else "normalized x1e3"


def to_metric(points, metric_extent):
    """Rescale normalized points per axis so their box matches ``metric_extent``."""
    pts = _points(points)
    ext = geo.compute_bbox(pts).extent
    factor = np.where(ext > 0, np.asarray(metric_extent, dtype=np.float64) / np.where(ext > 0, ext, 1.0), 1.0)
    return pts * factor


def evaluate(pred_images, gt_images, pred_points, gt_points, conventions=MetricConventions()):
    """The five reconstruction metrics under the given reporting conventions.

    Image metrics are averaged over view pairs; ``LPIPS`` is reported as
    unavailable.
    """
    if len(pred_images) != len(gt_images):
        raise ValueError("prediction and ground truth have different view counts")
    if len(pred_images):
        s = float(np.mean([ssim(p, g) for p, g in zip(pred_images, gt_images)]))
        ps = [psnr(p, g) for p, g in zip(pred_images, gt_images)]
        p = float(np.mean(ps))
    else:
        s, p = None, None
    cd = chamfer_distance(pred_points, gt_points) * conventions.cd_multiplier
    fs = f_score(pred_points, gt_points, conventions.tau)
    return {"SSIM": s, "PSNR": p, "LPIPS": LPIPS_UNAVAILABLE, "CD": cd, "F-score": fs}
