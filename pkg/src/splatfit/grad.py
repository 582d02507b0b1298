"""Analytic backward pass for :func:`splatfit.render.rasterize` and a
finite-difference oracle to check it against.

Camera gradients follow the chain through each Gaussian's projected mean
and 2D covariance (and, for degree-1 SH, through the view direction used
for color). The three routes are also reported separately in
``GradientSet.camera_paths``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from . import geometry as geo
from .render import GaussianCloud, RenderOptions, RenderOutput, rasterize

CAMERA_PARAMS = ("cam_quat", "cam_trans", "cam_fov")


@dataclass
class GradientSet:
    """Gradients for every raw Gaussian parameter and every camera parameter."""

    position_sph: np.ndarray
    scale_raw: np.ndarray
    rotation: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    cam_quat: np.ndarray
    cam_trans: np.ndarray
    cam_fov: np.ndarray
    metric_extent: Optional[np.ndarray] = None
    camera_paths: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    NAMES = ("position_sph", "scale_raw", "rotation", "opacity_raw", "sh") + CAMERA_PARAMS

    @classmethod
    def zeros(cls, cloud: GaussianCloud, with_extent=False):
        n = len(cloud)
        return cls(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
            np.zeros_like(cloud.sh), np.zeros(4), np.zeros(3), np.zeros(2),
            np.zeros(3) if with_extent else None,
        )

    def items(self):
        for name in self.NAMES:
            yield name, getattr(self, name)

    def __add__(self, other: "GradientSet") -> "GradientSet":
        out = self.copy()
        out += other
        return out

    def __iadd__(self, other: "GradientSet"):
        for name in self.NAMES:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        if other.metric_extent is not None:
            base = self.metric_extent if self.metric_extent is not None else 0.0
            self.metric_extent = base + other.metric_extent
        return self

    def scaled(self, factor) -> "GradientSet":
        out = self.copy()
        for name in self.NAMES:
            setattr(out, name, getattr(out, name) * factor)
        if out.metric_extent is not None:
            out.metric_extent = out.metric_extent * factor
        return out

    def copy(self) -> "GradientSet":
        ext = None if self.metric_extent is None else self.metric_extent.copy()
        return GradientSet(*(getattr(self, n).copy() for n in self.NAMES), metric_extent=ext)

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    def norm(self):
        return math.sqrt(sum(float(np.sum(v * v)) for _, v in self.items()))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _composite_backward(tile, colors, bg, g_rgb, g_alpha):
    """Gradients of one tile w.r.t. its colors and per-contribution alphas."""
    alphas = tile.alphas.astype(np.float64)
    trans = tile.trans.astype(np.float64)
    k, p = alphas.shape
    g_colors = (alphas * trans) @ g_rgb

    # behind[i] = color composited from everything behind contribution i,
    # accumulated back to front so no division by (1 - alpha) is needed
    g_alpha_c = np.empty_like(alphas)
    behind_rgb = np.broadcast_to(bg, (p, 3)).copy()
    behind_a = np.zeros(p)
    for i in range(k - 1, -1, -1):
        a = alphas[i]
        diff = g_rgb @ colors[i] - np.einsum("pc,pc->p", behind_rgb, g_rgb)
        if g_alpha is not None:
            diff = diff + g_alpha * (1.0 - behind_a)
        g_alpha_c[i] = trans[i] * diff
        behind_rgb = a[:, None] * colors[i] + (1.0 - a[:, None]) * behind_rgb
        if g_alpha is not None:
            behind_a = a + (1.0 - a) * behind_a
    return g_colors, np.where(tile.used, g_alpha_c, 0.0)


def _splat_backward(tile, conic, g_alpha_c):
    """Gradients of one tile's alphas w.r.t. opacity, mean2d and conic."""
    raw = g_alpha_c * tile.alphas  # dL/dalpha * alpha
    g_opacity = np.sum(g_alpha_c * tile.falloff * tile.used, axis=1)
    dx = tile.deltas[..., 0].astype(np.float64)
    dy = tile.deltas[..., 1].astype(np.float64)
    qdx = conic[:, 0, 0, None] * dx + conic[:, 0, 1, None] * dy
    qdy = conic[:, 0, 1, None] * dx + conic[:, 1, 1, None] * dy
    g_mean2d = np.stack([np.sum(raw * qdx, axis=1), np.sum(raw * qdy, axis=1)], axis=-1)
    g_conic = np.empty((len(raw), 2, 2))
    g_conic[:, 0, 0] = -0.5 * np.sum(raw * dx * dx, axis=1)
    g_conic[:, 1, 1] = -0.5 * np.sum(raw * dy * dy, axis=1)
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = -0.5 * np.sum(raw * dx * dy, axis=1)
    return g_opacity, g_mean2d, g_conic


def _raster_backward(out: RenderOutput, g_rgb, g_alpha):
    """Accumulate per-Gaussian gradients over all tiles."""
    proj = out.proj
    k = len(proj.index)
    g_colors = np.zeros((k, 3))
    g_opacity = np.zeros(k)
    g_mean2d = np.zeros((k, 2))
    g_conic = np.zeros((k, 2, 2))
    for tile in out.tiles:
        rows, pix = tile.rows, tile.pixels
        ga = None if g_alpha is None else g_alpha[pix]
        gc, g_alpha_c = _composite_backward(tile, proj.colors[rows], out.background, g_rgb[pix], ga)
        go, gm, gq = _splat_backward(tile, proj.conic[rows], g_alpha_c)
        # rows are unique within a tile, so fancy-index accumulation is safe
        g_colors[rows] += gc
        g_opacity[rows] += go
        g_mean2d[rows] += gm
        g_conic[rows] += gq
    g_cov2d = -proj.conic @ g_conic @ proj.conic
    return g_colors, g_opacity, g_mean2d, g_cov2d


def _projection_backward(proj, cam: geo.Camera, g_mean2d, g_cov2d):
    """Split projection gradients into the mean route and the covariance route.

    Returns two dicts with keys ``cam_points``, ``focal``, ``rot`` (camera
    rotation matrix) and, for the covariance route, ``cov3d``.
    """
    rot = cam.rotmat
    fx, fy = cam.focal
    pc = proj.cam_points
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    jac = proj.jac

    # mean route: mean2d = f * (x, y) / z + c
    g_pc_mu = np.stack(
        [
            g_mean2d[:, 0] * fx / z,
            g_mean2d[:, 1] * fy / z,
            -(g_mean2d[:, 0] * fx * x + g_mean2d[:, 1] * fy * y) / z**2,
        ],
        axis=-1,
    )
    g_focal_mu = np.array([np.sum(g_mean2d[:, 0] * x / z), np.sum(g_mean2d[:, 1] * y / z)])
    mu_route = dict(cam_points=g_pc_mu, focal=g_focal_mu, rot=np.zeros((3, 3)))

    # covariance route: cov2d = T cov3d T^T + blur, T = J R
    tmat = jac @ rot
    g_tmat = 2.0 * g_cov2d @ tmat @ proj.cov3d
    g_cov3d = np.swapaxes(tmat, -1, -2) @ g_cov2d @ tmat
    g_jac = g_tmat @ rot.T
    g_rot_cov = np.einsum("kij,kil->jl", jac, g_tmat)
    gj00, gj02 = g_jac[:, 0, 0], g_jac[:, 0, 2]
    gj11, gj12 = g_jac[:, 1, 1], g_jac[:, 1, 2]
    g_pc_cov = np.stack(
        [
            -gj02 * fx / z**2,
            -gj12 * fy / z**2,
            -gj00 * fx / z**2 + 2 * gj02 * fx * x / z**3 - gj11 * fy / z**2 + 2 * gj12 * fy * y / z**3,
        ],
        axis=-1,
    )
    g_focal_cov = np.array(
        [np.sum(gj00 / z - gj02 * x / z**2), np.sum(gj11 / z - gj12 * y / z**2)]
    )
    cov_route = dict(cam_points=g_pc_cov, focal=g_focal_cov, rot=g_rot_cov, cov3d=g_cov3d)
    return mu_route, cov_route


def _color_backward(cloud: GaussianCloud, proj, g_colors):
    """Through the clamp and SH evaluation; returns (g_sh_visible, g_view_vec)."""
    g_raw = np.where((proj.color_raw >= 0.0) & (proj.color_raw <= 1.0), g_colors, 0.0)
    degree = cloud.sh_degree
    basis = geo.sh_basis(proj.view_dirs, degree)
    g_sh = np.zeros((len(proj.index),) + cloud.sh.shape[1:])
    g_sh[:, : basis.shape[1], :] = basis[:, :, None] * g_raw[:, None, :]
    g_vec = np.zeros((len(proj.index), 3))
    if degree >= 1:
        sh = cloud.sh[proj.index]
        c1 = geo.SH_C1
        g_dir = np.stack(
            [
                -c1 * np.sum(sh[:, 3] * g_raw, axis=-1),
                -c1 * np.sum(sh[:, 1] * g_raw, axis=-1),
                c1 * np.sum(sh[:, 2] * g_raw, axis=-1),
            ],
            axis=-1,
        )
        d = proj.view_dirs
        g_vec = (g_dir - np.sum(g_dir * d, axis=-1, keepdims=True) * d) / proj.view_dist[:, None]
    return g_sh, g_vec


def _camera_from_route(cam: geo.Camera, means, g_pc, g_focal, g_rot, g_center):
    """Assemble (q, t, fov) gradients from one route's intermediate grads."""
    rot = cam.rotmat
    g_rot = g_rot + g_pc.T @ means
    g_trans = g_pc.sum(axis=0)
    # center = -R^T t
    g_trans = g_trans - rot @ g_center
    g_rot = g_rot - np.outer(cam.trans, g_center)
    size = np.array([cam.width, cam.height], dtype=np.float64)
    dfocal_dfov = -0.25 * size / np.sin(0.5 * cam.fov) ** 2
    return dict(
        cam_quat=geo.rotmat_grad_to_quat(cam.quat, g_rot),
        cam_trans=g_trans,
        cam_fov=g_focal * dfocal_dfov,
    )


def backward_render(cloud: GaussianCloud, cam: geo.Camera, out: RenderOutput, dL_dimage, dL_dalpha=None) -> GradientSet:
    """Reverse-mode derivative of ``rasterize`` for upstream image gradients.

    Args:
        cloud, cam: the inputs ``out`` was rendered from.
        out: result of ``rasterize(cloud, cam, ...)``.
        dL_dimage: ``(H, W, 3)`` gradient of the scalar loss w.r.t. ``out.rgb``.
        dL_dalpha: optional ``(H, W)`` gradient w.r.t. ``out.alpha``.
    """
    if out.n_gaussians != len(cloud) or out.rgb.shape[:2] != (cam.height, cam.width):
        raise ValueError("render buffers do not match the given cloud/camera")
    if out.camera is not None and not (
        np.array_equal(out.camera.quat, cam.quat)
        and np.array_equal(out.camera.trans, cam.trans)
        and np.array_equal(out.camera.fov, cam.fov)
    ):
        raise ValueError("render buffers were produced with a different camera")
    dL_dimage = np.asarray(dL_dimage, dtype=np.float64)
    if dL_dimage.shape != out.rgb.shape:
        raise ValueError(f"image gradient has shape {dL_dimage.shape}, expected {out.rgb.shape}")
    g_rgb = dL_dimage.reshape(-1, 3)
    g_alpha = None if dL_dalpha is None else np.asarray(dL_dalpha, dtype=np.float64).reshape(-1)

    grads = GradientSet.zeros(cloud)
    proj = out.proj
    idx = proj.index
    if len(idx) == 0:
        grads.camera_paths = {k: dict(cam_quat=np.zeros(4), cam_trans=np.zeros(3), cam_fov=np.zeros(2)) for k in ("mean", "cov", "color")}
        return grads

    g_colors, g_opacity, g_mean2d, g_cov2d = _raster_backward(out, g_rgb, g_alpha)
    mu_route, cov_route = _projection_backward(proj, cam, g_mean2d, g_cov2d)
    g_sh, g_vec = _color_backward(cloud, proj, g_colors)

    rot = cam.rotmat
    # world-mean gradient from all three routes
    g_mean = (mu_route["cam_points"] + cov_route["cam_points"]) @ rot + g_vec
    g_pos = np.einsum("ki,kij->kj", g_mean, geo.spherical_jacobian(cloud.position_sph[idx]))

    # cov3d = M M^T, M = R_g S
    g_cov3d = cov_route["cov3d"]
    rot_g = geo.quat_to_rotmat(cloud.rotation[idx])
    scales = cloud.scales[idx]
    m = rot_g * scales[:, None, :]
    g_m = (g_cov3d + np.swapaxes(g_cov3d, -1, -2)) @ m
    g_scale = np.einsum("kij,kij->kj", rot_g, g_m)
    g_rot_g = g_m * scales[:, None, :]

    opac = proj.opacity
    grads.position_sph[idx] = g_pos
    grads.scale_raw[idx] = g_scale * scales
    grads.rotation[idx] = geo.rotmat_grad_to_quat(cloud.rotation[idx], g_rot_g)
    grads.opacity_raw[idx] = g_opacity * opac * (1.0 - opac)
    grads.sh[idx] = g_sh

    zero3 = np.zeros(3)
    paths = {
        "mean": _camera_from_route(cam, proj.means, mu_route["cam_points"], mu_route["focal"], mu_route["rot"], zero3),
        "cov": _camera_from_route(cam, proj.means, cov_route["cam_points"], cov_route["focal"], cov_route["rot"], zero3),
        "color": _camera_from_route(cam, proj.means, np.zeros_like(g_vec), np.zeros(2), np.zeros((3, 3)), -g_vec.sum(axis=0)),
    }
    full = _camera_from_route(
        cam,
        proj.means,
        mu_route["cam_points"] + cov_route["cam_points"],
        mu_route["focal"] + cov_route["focal"],
        mu_route["rot"] + cov_route["rot"],
        -g_vec.sum(axis=0),
    )
    grads.cam_quat = full["cam_quat"]
    grads.cam_trans = full["cam_trans"]
    grads.cam_fov = full["cam_fov"]
    grads.camera_paths = paths
    return grads


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def _get_param(cloud, cam, name):
    if name == "cam_quat":
        return cam.quat
    if name == "cam_trans":
        return cam.trans
    if name == "cam_fov":
        return cam.fov
    return getattr(cloud, name)


def _with_param(cloud, cam, name, value):
    if name == "cam_quat":
        return cloud, cam.replace(quat=value)
    if name == "cam_trans":
        return cloud, cam.replace(trans=value)
    if name == "cam_fov":
        return cloud, cam.replace(fov=value)
    return cloud.replace(**{name: value}), cam


def _is_quaternion(name):
    return name in ("rotation", "cam_quat")


@dataclass
class FDResult:
    grads: GradientSet
    skipped: Dict[str, np.ndarray]  # probes that changed the contributor set
    nonfinite: Dict[str, np.ndarray]  # probes where the loss was not finite


def finite_diff_grad(
    cloud: GaussianCloud,
    cam: geo.Camera,
    loss_fn: Callable[[np.ndarray, np.ndarray], float],
    h: float = 1e-5,
    opts: RenderOptions = RenderOptions(),
    params=GradientSet.NAMES,
) -> FDResult:
    """Central differences of ``loss_fn(rgb, alpha)`` for every scalar parameter.

    Quaternion probes are renormalized, and rows where every component was
    probed are projected onto the tangent space of the unit sphere. Probes that change which
    contributions are composited (truncation boundary, transmittance cutoff,
    depth order) are marked skipped and set to NaN.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    opts = RenderOptions(opts.background, True, opts.truncation_sigma, opts.min_transmittance)
    base_sig = rasterize(cloud, cam, opts).contributor_signature()
    grads = GradientSet.zeros(cloud)
    skipped, nonfinite = {}, {}

    def evaluate(c, k):
        out = rasterize(c, k, opts)
        return float(loss_fn(out.rgb, out.alpha)), out.contributor_signature() == base_sig

    for name in params:
        x0 = np.asarray(_get_param(cloud, cam, name), dtype=np.float64)
        g = np.zeros_like(x0)
        skip = np.zeros(x0.shape, dtype=bool)
        bad = np.zeros(x0.shape, dtype=bool)
        quat = _is_quaternion(name)
        for flat in range(x0.size):
            pos = np.unravel_index(flat, x0.shape)
            vals = []
            same = True
            for sign in (1.0, -1.0):
                x = x0.copy()
                x[pos] += sign * h
                if quat:
                    row = pos[:-1]
                    x[row] = x[row] / np.linalg.norm(x[row])
                c, k = _with_param(cloud, cam, name, x)
                val, ok = evaluate(c, k)
                vals.append(val)
                same &= ok
            if not all(np.isfinite(vals)):
                bad[pos] = True
                g[pos] = np.nan
            elif not same:
                skip[pos] = True
                g[pos] = np.nan
            else:
                g[pos] = (vals[0] - vals[1]) / (2 * h)
        if quat:
            # renormalized probes already give tangent components; the
            # projection only strips round-off and needs every component
            q = x0 / np.linalg.norm(x0, axis=-1, keepdims=True)
            whole = ~np.any(skip | bad, axis=-1, keepdims=True)
            g = np.where(whole, g - np.sum(np.where(whole, g, 0.0) * q, axis=-1, keepdims=True) * q, g)
        setattr(grads, name, g)
        skipped[name] = skip
        nonfinite[name] = bad
    return FDResult(grads, skipped, nonfinite)


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


@dataclass
class GradcheckReport:
    max_rel_error: Dict[str, float]
    n_checked: Dict[str, int]
    n_skipped: Dict[str, int]
    worst_index: Dict[str, tuple]
    tol: float
    passed: bool

    def failing(self):
        return [k for k, v in self.max_rel_error.items() if not v <= self.tol]

    def to_dict(self):
        return dict(
            tol=self.tol,
            passed=self.passed,
            params={
                k: dict(
                    max_rel_error=self.max_rel_error[k],
                    checked=self.n_checked[k],
                    skipped=self.n_skipped[k],
                    worst_index=list(self.worst_index[k]),
                )
                for k in self.max_rel_error
            },
        )


def gradcheck(
    cloud: GaussianCloud,
    cam: geo.Camera,
    loss_fn,
    tol: float = 1e-4,
    h: float = 1e-5,
    opts: RenderOptions = RenderOptions(),
    analytic: Optional[GradientSet] = None,
) -> GradcheckReport:
    """Compare analytic and finite-difference gradients parameter by parameter.

    ``loss_fn(rgb, alpha)`` must return ``(value, dL_drgb)`` or
    ``(value, dL_drgb, dL_dalpha)``. ``analytic`` overrides the computed
    analytic gradients (fault injection).
    """
    opts = RenderOptions(opts.background, True, opts.truncation_sigma, opts.min_transmittance)
    if analytic is None:
        out = rasterize(cloud, cam, opts)
        res = loss_fn(out.rgb, out.alpha)
        g_alpha = res[2] if len(res) > 2 else None
        analytic = backward_render(cloud, cam, out, res[1], g_alpha)
    fd = finite_diff_grad(cloud, cam, lambda rgb, alpha: loss_fn(rgb, alpha)[0], h, opts)
    max_err, n_checked, n_skipped, worst = {}, {}, {}, {}
    for name in GradientSet.NAMES:
        a = getattr(analytic, name)
        f = getattr(fd.grads, name)
        ok = np.isfinite(f)
        err = np.where(ok, relative_error(a, np.nan_to_num(f)), 0.0)
        bad = ~fd.nonfinite[name]
        n_checked[name] = int(ok.sum())
        n_skipped[name] = int((~ok & bad).sum())
        if fd.nonfinite[name].any():
            max_err[name] = float("inf")
            worst[name] = tuple(int(i) for i in np.argwhere(fd.nonfinite[name])[0])
        elif ok.any():
            max_err[name] = float(err.max())
            worst[name] = tuple(int(i) for i in np.unravel_index(np.argmax(err), err.shape))
        else:
            max_err[name] = 0.0
            worst[name] = ()
    passed = all(v <= tol for v in max_err.values())
    return GradcheckReport(max_err, n_checked, n_skipped, worst, tol, passed)
