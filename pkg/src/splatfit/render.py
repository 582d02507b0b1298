"""Forward rasterization of a Gaussian cloud.

The image is split into 16x16 tiles. Inside a tile, every Gaussian whose
truncated footprint box overlaps the tile is evaluated densely at every
pixel center, and the footprint ellipse is applied as a mask. The result is
identical to a per-pixel evaluation of all visible Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import geometry as geo

OPACITY_BIAS = float(np.log(0.1 / 0.9))  # logit(0.1)
SCALE_BIAS = float(np.log(0.02))
TRUNCATION_SIGMA = 3.0
MIN_TRANSMITTANCE = 1e-4


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def activate_opacity(raw):
    return sigmoid(np.asarray(raw, dtype=np.float64) + OPACITY_BIAS)


def activate_scale(raw):
    return np.exp(np.asarray(raw, dtype=np.float64) + SCALE_BIAS)


def opacity_to_raw(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    return np.log(alpha / (1.0 - alpha)) - OPACITY_BIAS


def scale_to_raw(scale):
    return np.log(np.asarray(scale, dtype=np.float64)) - SCALE_BIAS


@dataclass
class GaussianCloud:
    """Raw (pre-activation) Gaussian parameters, one row per Gaussian.

    Attributes:
        position_sph: ``(n, 3)`` spherical position ``(r, theta, phi)``.
        scale_raw: ``(n, 3)``; ``scale = exp(scale_raw + ln 0.02)``.
        rotation: ``(n, 4)`` quaternion ``(w, x, y, z)``.
        opacity_raw: ``(n,)``; ``opacity = sigmoid(opacity_raw + logit 0.1)``.
        sh: ``(n, k, 3)`` SH coefficients, ``k`` = 1 (degree 0) or 4 (degree 1).
        metric_extent: optional real-world box size in meters.
    """

    position_sph: np.ndarray
    scale_raw: np.ndarray
    rotation: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    metric_extent: Optional[np.ndarray] = None

    PARAM_NAMES = ("position_sph", "scale_raw", "rotation", "opacity_raw", "sh")

    def __post_init__(self):
        self.position_sph = np.asarray(self.position_sph, dtype=np.float64).reshape(-1, 3)
        n = len(self.position_sph)
        self.scale_raw = np.asarray(self.scale_raw, dtype=np.float64).reshape(n, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, -1, 3)
        if self.sh.shape[1] not in (1, 4):
            raise ValueError(f"sh must hold 1 or 4 coefficients per channel, got {self.sh.shape[1]}")
        if self.metric_extent is not None:
            self.metric_extent = np.asarray(self.metric_extent, dtype=np.float64).reshape(3)
            if np.any(self.metric_extent <= 0):
                raise ValueError("metric extent must be positive along every axis")

    def __len__(self):
        return len(self.position_sph)

    @property
    def sh_degree(self):
        return 0 if self.sh.shape[1] == 1 else 1

    @property
    def means(self):
        return geo.spherical_to_cartesian(self.position_sph)

    @property
    def opacities(self):
        return activate_opacity(self.opacity_raw)

    @property
    def scales(self):
        return activate_scale(self.scale_raw)

    def covariances(self):
        rot = geo.quat_to_rotmat(self.rotation)
        m = rot * self.scales[:, None, :]
        return m @ np.swapaxes(m, -1, -2)

    def copy(self) -> "GaussianCloud":
        ext = None if self.metric_extent is None else self.metric_extent.copy()
        return GaussianCloud(
            self.position_sph.copy(), self.scale_raw.copy(), self.rotation.copy(),
            self.opacity_raw.copy(), self.sh.copy(), ext,
        )

    def replace(self, **changes) -> "GaussianCloud":
        return replace(self, **changes)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            self.position_sph[idx], self.scale_raw[idx], self.rotation[idx],
            self.opacity_raw[idx], self.sh[idx], self.metric_extent,
        )

    @classmethod
    def from_activated(cls, means, scales, rotations, opacities, colors=None, sh=None, metric_extent=None):
        """Build a cloud from Cartesian means and activated attributes.

        ``colors`` (``(n, 3)`` RGB in [0, 1]) sets a degree-0 SH block; pass
        ``sh`` instead for full control.
        """
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        if sh is None:
            colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
            sh = (colors / geo.SH_C0)[:, None, :]
        return cls(
            geo.cartesian_to_spherical(means),
            scale_to_raw(np.broadcast_to(scales, means.shape)),
            np.broadcast_to(np.asarray(rotations, dtype=np.float64), (len(means), 4)).copy(),
            opacity_to_raw(np.broadcast_to(opacities, (len(means),))),
            sh,
            metric_extent,
        )


@dataclass(frozen=True)
class RenderOptions:
    background: tuple = (1.0, 1.0, 1.0)
    deterministic: bool = True
    truncation_sigma: float = TRUNCATION_SIGMA
    min_transmittance: float = MIN_TRANSMITTANCE

    @property
    def dtype(self):
        return np.float64 if self.deterministic else np.float32


@dataclass
class Projection:
    """Per-Gaussian projection intermediates for the visible set (depth order)."""

    index: np.ndarray  # original Gaussian indices, front to back
    means: np.ndarray  # world means (K, 3)
    cam_points: np.ndarray  # camera-space means (K, 3)
    jac: np.ndarray  # perspective Jacobian (K, 2, 3)
    cov3d: np.ndarray  # (K, 3, 3)
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # inverse of cov2d (K, 2, 2)
    opacity: np.ndarray  # (K,)
    view_dirs: np.ndarray  # unit direction camera center -> mean (K, 3)
    view_dist: np.ndarray  # (K,)
    color_raw: np.ndarray  # SH output before clamping (K, 3)
    colors: np.ndarray  # clamped (K, 3)


@dataclass
class Tile:
    """Dense buffers for one image tile.

    Rows follow the depth order of the Gaussians whose truncated footprint
    box overlaps the tile; ``rows`` maps them to positions in the visible
    set. Columns are the tile's flattened pixel indices ``pixels``.
    """

    pixels: np.ndarray  # (Pt,)
    rows: np.ndarray  # (Kt,)
    deltas: np.ndarray  # pixel - mean2d (Kt, Pt, 2)
    falloff: np.ndarray  # exp(-0.5 d^T conic d) (Kt, Pt)
    used: np.ndarray  # inside the footprint and before the cutoff (Kt, Pt)
    alphas: np.ndarray  # effective per-contribution alpha, 0 where unused (Kt, Pt)
    trans: np.ndarray  # transmittance in front of each contribution (Kt, Pt)


@dataclass
class RenderOutput:
    """Rendered image plus the buffers the backward pass consumes.

    The dense views ``alphas``, ``trans`` and ``used`` are ``(K, P)`` arrays
    over the visible Gaussians in depth order and the flattened pixels.
    """

    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    proj: Projection
    tiles: list
    final_trans: np.ndarray  # (P,)
    background: np.ndarray
    n_gaussians: int = 0
    camera: Optional[geo.Camera] = None

    @property
    def order(self):
        return self.proj.index

    def _dense(self, attr, dtype=np.float64):
        k = len(self.proj.index)
        out = np.zeros((k, self.final_trans.size), dtype=dtype)
        for t in self.tiles:
            if len(t.rows):
                out[np.ix_(t.rows, t.pixels)] = getattr(t, attr)
        return out

    @property
    def alphas(self):
        return self._dense("alphas")

    @property
    def trans(self):
        return self._dense("trans")

    @property
    def used(self):
        return self._dense("used", bool)

    @property
    def weights(self):
        return self.alphas * self.trans

    def contributors(self, u, v):
        """Contribution records at pixel column ``u``, row ``v``, front to back."""
        p = v * self.rgb.shape[1] + u
        recs = []
        for t in self.tiles:
            hit = np.nonzero(t.pixels == p)[0]
            if not len(hit):
                continue
            col = hit[0]
            for j in np.nonzero(t.used[:, col])[0]:
                i = t.rows[j]
                recs.append(
                    dict(
                        gaussian=int(self.proj.index[i]),
                        mean2d=self.proj.mean2d[i].copy(),
                        conic=self.proj.conic[i].copy(),
                        alpha=float(t.alphas[j, col]),
                        transmittance=float(t.trans[j, col]),
                    )
                )
        return recs

    def contributor_signature(self):
        """Hashable summary of which contributions were used."""
        parts = [self.proj.index.tobytes()]
        parts += [t.rows.tobytes() + np.packbits(t.used).tobytes() for t in self.tiles]
        return b"|".join(parts)


def pixel_centers(width, height):
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return np.stack([u.ravel(), v.ravel()], axis=-1)


def _project_all(cloud: GaussianCloud, cam: geo.Camera):
    means = cloud.means
    cov3d = cloud.covariances()
    rot = cam.rotmat
    pc = means @ rot.T + cam.trans
    fx, fy = cam.focal
    z = pc[:, 2]
    zs = np.where(z > geo.NEAR_PLANE, z, 1.0)
    jac = np.zeros((len(means), 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * pc[:, 0] / zs**2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * pc[:, 1] / zs**2
    tmat = jac @ rot
    cov2d = tmat @ cov3d @ np.swapaxes(tmat, -1, -2) + geo.COV2D_BLUR * np.eye(2)
    mean2d = np.stack([fx * pc[:, 0] / zs, fy * pc[:, 1] / zs], axis=-1) + cam.principal_point
    return means, cov3d, pc, jac, mean2d, cov2d


def footprint_box(mean2d, cov2d, truncation_sigma=TRUNCATION_SIGMA):
    """Axis-aligned bounds ``(lo, hi)`` of each truncated footprint ellipse."""
    radius = truncation_sigma * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=-1))
    return mean2d - radius, mean2d + radius


def depth_sort_cull(cloud: GaussianCloud, cam: geo.Camera, truncation_sigma=TRUNCATION_SIGMA):
    """Indices of visible Gaussians sorted front to back (stable on ties).

    Drops Gaussians at or behind the near plane and those whose
    ``truncation_sigma`` footprint box misses the image entirely.
    """
    _, _, pc, _, mean2d, cov2d = _project_all(cloud, cam)
    return _visible_order(pc, mean2d, cov2d, cam, truncation_sigma)


def _visible_order(pc, mean2d, cov2d, cam, truncation_sigma):
    z = pc[:, 2]
    in_front = z > geo.NEAR_PLANE
    lo, hi = footprint_box(mean2d, cov2d, truncation_sigma)
    on_screen = (hi[:, 0] >= 0) & (lo[:, 0] <= cam.width) & (hi[:, 1] >= 0) & (lo[:, 1] <= cam.height)
    keep = np.nonzero(in_front & on_screen)[0]
    return keep[np.argsort(z[keep], kind="stable")]


def project_cloud(cloud: GaussianCloud, cam: geo.Camera, truncation_sigma=TRUNCATION_SIGMA) -> Projection:
    means, cov3d, pc, jac, mean2d, cov2d = _project_all(cloud, cam)
    idx = _visible_order(pc, mean2d, cov2d, cam, truncation_sigma)
    center = cam.center
    offset = means[idx] - center
    dist = np.linalg.norm(offset, axis=-1)
    dirs = offset / dist[:, None]
    color_raw = geo.sh_eval(cloud.sh[idx], dirs, cloud.sh_degree, clamp=False)
    return Projection(
        index=idx,
        means=means[idx],
        cam_points=pc[idx],
        jac=jac[idx],
        cov3d=cov3d[idx],
        mean2d=mean2d[idx],
        cov2d=cov2d[idx],
        conic=np.linalg.inv(cov2d[idx]),
        opacity=cloud.opacities[idx],
        view_dirs=dirs,
        view_dist=dist,
        color_raw=color_raw,
        colors=np.clip(color_raw, 0.0, 1.0),
    )


TILE_SIZE = 16


def _rasterize_tile(proj, rows, pix, pixels, opts, dtype):
    deltas = pix[None, :, :] - proj.mean2d[rows][:, None, :].astype(dtype)
    conic = proj.conic[rows].astype(dtype)
    dx, dy = deltas[..., 0], deltas[..., 1]
    maha = (
        conic[:, 0, 0, None] * dx * dx
        + 2.0 * conic[:, 0, 1, None] * dx * dy
        + conic[:, 1, 1, None] * dy * dy
    )
    inside = maha <= opts.truncation_sigma**2
    falloff = np.exp(-0.5 * maha)
    raw_alpha = np.where(inside, proj.opacity[rows].astype(dtype)[:, None] * falloff, 0.0).astype(dtype)

    trans = np.empty_like(raw_alpha)
    trans[0] = 1.0
    np.cumprod(1.0 - raw_alpha[:-1], axis=0, out=trans[1:])
    # once transmittance drops below the cutoff nothing further is composited
    active = trans >= opts.min_transmittance
    alphas = np.where(active, raw_alpha, 0.0).astype(dtype)
    trans = np.where(active, trans, 0.0).astype(dtype)
    last = len(rows) - 1 - np.argmax(active[::-1], axis=0)
    cols = np.arange(len(pixels))
    final_trans = trans[last, cols] * (1.0 - alphas[last, cols])
    tile = Tile(pixels, rows, deltas, falloff, inside & active, alphas, trans)
    return tile, final_trans


def rasterize(cloud: GaussianCloud, cam: geo.Camera, opts: RenderOptions = RenderOptions()) -> RenderOutput:
    """Front-to-back alpha compositing of ``cloud`` seen from ``cam``.

    Per pixel ``C = sum_i c_i a_i T_i + T_final * background`` where
    ``a_i = opacity_i * exp(-0.5 d^T conic_i d)`` inside the 3-sigma
    footprint and ``T_i`` is the product of ``1 - a_j`` over Gaussians in
    front. A Gaussian is composited only while ``T_i >= min_transmittance``.
    """
    dtype = opts.dtype
    bg = np.asarray(opts.background, dtype=np.float64)
    height, width = cam.height, cam.width
    proj = project_cloud(cloud, cam, opts.truncation_sigma)
    lo, hi = footprint_box(proj.mean2d, proj.cov2d, opts.truncation_sigma)
    pad = 1e-6
    colors = proj.colors.astype(dtype)
    rgb = np.empty((height * width, 3), dtype=dtype)
    final_trans = np.ones(height * width, dtype=dtype)
    tiles = []
    for y0 in range(0, height, TILE_SIZE):
        y1 = min(y0 + TILE_SIZE, height)
        for x0 in range(0, width, TILE_SIZE):
            x1 = min(x0 + TILE_SIZE, width)
            rows = np.nonzero(
                (hi[:, 0] >= x0 + 0.5 - pad) & (lo[:, 0] <= x1 - 0.5 + pad)
                & (hi[:, 1] >= y0 + 0.5 - pad) & (lo[:, 1] <= y1 - 0.5 + pad)
            )[0]
            yy, xx = np.mgrid[y0:y1, x0:x1]
            pixels = (yy * width + xx).ravel()
            if not len(rows):
                rgb[pixels] = bg
                continue
            pix = np.stack([xx.ravel() + 0.5, yy.ravel() + 0.5], axis=-1).astype(dtype)
            tile, t_final = _rasterize_tile(proj, rows, pix, pixels, opts, dtype)
            tiles.append(tile)
            rgb[pixels] = (tile.alphas * tile.trans).T @ colors[rows] + t_final[:, None] * bg.astype(dtype)
            final_trans[pixels] = t_final
    return RenderOutput(
        rgb=rgb.reshape(height, width, 3),
        alpha=(1.0 - final_trans).reshape(height, width),
        proj=proj,
        tiles=tiles,
        final_trans=final_trans,
        background=bg,
        n_gaussians=len(cloud),
        camera=cam,
    )


def render(cloud, cam, opts: RenderOptions = RenderOptions()):
    """Convenience wrapper returning only ``(rgb, alpha)``."""
    out = rasterize(cloud, cam, opts)
    return out.rgb, out.alpha
