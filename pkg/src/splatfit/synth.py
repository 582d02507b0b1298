"""Synthetic scenes: orbit cameras, ground-truth clouds, rendered datasets
and their on-disk layout.

Dataset directory::

    cameras.json      list of {quaternion [w,x,y,z], translation [x,y,z],
                      fov_x, fov_y, width, height}
    images/NNNN.png   8-bit RGBA render
    images/NNNN.npy   float64 RGBA render (lossless copy)
    cloud.json        raw Gaussian parameters, see CLOUD_FIELDS
    meta.json         seed, config echo, metric extent
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from . import geometry as geo
from .render import GaussianCloud, RenderOptions, opacity_to_raw, rasterize, scale_to_raw

CLOUD_FIELDS = (
    "r", "theta", "phi",
    "scale_raw_x", "scale_raw_y", "scale_raw_z",
    "rot_w", "rot_x", "rot_y", "rot_z",
    "opacity_raw",
    "sh[k][c] for k in bands, c in rgb",
)


@dataclass(frozen=True)
class OrbitConfig:
    orbits: int = 4
    views_per_orbit: int = 32
    elevation_deg: tuple = (75.0, 90.0)
    radius: tuple = (1.2, 1.8)
    fov_deg: tuple = (50.0, 70.0)
    lookat_radius: tuple = (0.0, 0.1)
    azimuth_jitter: bool = True
    resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.orbits < 1 or self.views_per_orbit < 1:
            raise ValueError("orbit and view counts must be >= 1")
        for name in ("elevation_deg", "radius", "fov_deg", "lookat_radius"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is reversed: {lo} > {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.radius[0] <= 0:
            raise ValueError("camera radius must be positive")
        if not (0 < self.fov_deg[0] and self.fov_deg[1] < 180):
            raise ValueError("fov must lie in (0, 180) degrees")


@dataclass
class OrbitSample:
    """Drawn values behind each camera (for diagnostics and range checks)."""

    elevation: np.ndarray
    azimuth: np.ndarray
    radius: np.ndarray
    fov: np.ndarray
    lookat: np.ndarray


def sample_orbit_cameras(cfg: OrbitConfig, return_sample=False):
    """``orbits * views_per_orbit`` cameras on randomized orbits around the origin.

    Per orbit: one elevation and one FOV. Per view: radius, azimuth offset
    in ``[-pi/V, pi/V)`` and a look-at point ``r_o * v_hat`` with
    ``v_hat`` uniform on the sphere and ``r_o`` uniform in
    ``lookat_radius``.
    """
    rng = np.random.default_rng(cfg.seed)
    nv = cfg.views_per_orbit
    cams = []
    rec = {k: [] for k in ("elevation", "azimuth", "radius", "fov", "lookat")}
    for _ in range(cfg.orbits):
        phi = math.radians(rng.uniform(*cfg.elevation_deg))
        fov = math.radians(rng.uniform(*cfg.fov_deg))
        for j in range(nv):
            r = rng.uniform(*cfg.radius)
            delta = rng.uniform(-math.pi / nv, math.pi / nv) if cfg.azimuth_jitter else 0.0
            theta = 2.0 * math.pi * j / nv + delta
            v = rng.normal(size=3)
            v_hat = v / np.linalg.norm(v)
            lookat = rng.uniform(*cfg.lookat_radius) * v_hat
            pos = geo.spherical_to_cartesian([r, theta, phi])
            cams.append(geo.Camera.look_at(pos, lookat, fov, cfg.resolution, cfg.resolution))
            rec["elevation"].append(phi)
            rec["azimuth"].append(theta)
            rec["radius"].append(r)
            rec["fov"].append(fov)
            rec["lookat"].append(lookat)
    if return_sample:
        return cams, OrbitSample(**{k: np.array(v) for k, v in rec.items()})
    return cams


def _balanced_directions(n, rng):
    """``n`` unit vectors summing to zero (antipodal pairs plus one triangle if odd)."""
    dirs = []
    if n % 2:
        if n == 1:
            return np.zeros((1, 3))
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        b = np.cross(a, rng.normal(size=3))
        b /= np.linalg.norm(b)
        c = np.cross(a, b)
        for k in range(3):
            ang = 2 * math.pi * k / 3
            dirs.append(math.cos(ang) * b + math.sin(ang) * c)
        n -= 3
    for _ in range(n // 2):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        dirs.extend([v, -v])
    return np.array(dirs)


def make_synthetic_cloud(
    n,
    seed=0,
    style="blob",
    radius=0.5,
    shell=(0.35, 0.5),
    scale_range=(0.04, 0.09),
    opacity_range=(0.6, 0.95),
    color_range=(0.15, 0.85),
    sh_degree=0,
    metric_extent=None,
) -> GaussianCloud:
    """Seeded random cloud centered on the origin.

    ``blob`` fills a ball of ``radius``; ``shell`` places every Gaussian at a
    distance within ``shell`` from the origin.
    """
    if n < 1:
        raise ValueError("need at least one Gaussian")
    rng = np.random.default_rng(seed)
    if style == "blob":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        means = d * radius * rng.uniform(0, 1, size=(n, 1)) ** (1 / 3)
        means -= means.mean(axis=0)
    elif style == "shell":
        d = _balanced_directions(n, rng)
        radii = rng.uniform(*shell, size=(n, 1))
        if n % 2 == 0:
            radii[1::2] = radii[0::2]
        else:
            radii[:3] = radii[0]
            radii[4::2] = radii[3::2]
        means = d * radii
        means -= means.mean(axis=0)
    else:
        raise ValueError(f"unknown style {style!r}")
    scales = rng.uniform(*scale_range, size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    opac = rng.uniform(*opacity_range, size=n)
    colors = rng.uniform(*color_range, size=(n, 3))
    sh = np.zeros((n, geo.sh_dim(sh_degree), 3))
    sh[:, 0] = colors / geo.SH_C0
    if sh_degree:
        sh[:, 1:] = rng.normal(scale=0.15, size=(n, 3, 3))
    return GaussianCloud(
        geo.cartesian_to_spherical(means), scale_to_raw(scales), q, opacity_to_raw(opac), sh, metric_extent
    )


@dataclass
class Dataset:
    images: np.ndarray  # (V, H, W, 4) RGBA in [0, 1]
    cameras: List[geo.Camera]
    cloud: Optional[GaussianCloud] = None
    metric_extent: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cameras)

    @property
    def rgb(self):
        return self.images[..., :3]


def render_dataset(cloud: GaussianCloud, cameras: Sequence[geo.Camera], resolution=None, opts: RenderOptions = RenderOptions()) -> Dataset:
    """One RGBA render per camera; ``resolution`` overrides the camera size."""
    cams = [c.replace(width=resolution, height=resolution) if resolution else c for c in cameras]
    images = []
    for cam in cams:
        out = rasterize(cloud, cam, opts)
        images.append(np.concatenate([out.rgb, out.alpha[..., None]], axis=-1))
    if images:
        arr = np.stack(images).astype(np.float64)
    else:
        size = resolution or 0
        arr = np.zeros((0, size, size, 4))
    return Dataset(arr, cams, cloud, cloud.metric_extent)


def perturb_cameras(cameras: Sequence[geo.Camera], rot_deg_max, trans_frac_max, seed=0):
    """Rotate each camera by at most ``rot_deg_max`` about its center and move
    the center by at most ``trans_frac_max * |center|``. Intrinsics are kept.
    """
    if rot_deg_max < 0 or trans_frac_max < 0:
        raise ValueError("perturbation bounds must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for cam in cameras:
        axis = rng.normal(size=3)
        angle = math.radians(rot_deg_max) * rng.uniform()
        dq = geo.quat_from_axis_angle(axis, angle)
        step = rng.normal(size=3)
        step *= trans_frac_max * np.linalg.norm(cam.center) * rng.uniform() ** (1 / 3) / np.linalg.norm(step)
        if rot_deg_max == 0 and trans_frac_max == 0:
            out.append(cam)
            continue
        quat = geo.quat_normalize(geo.quat_multiply(dq, cam.quat))
        center = cam.center + step
        out.append(cam.replace(quat=quat, trans=-geo.quat_to_rotmat(quat) @ center))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def camera_to_dict(cam: geo.Camera):
    return dict(
        quaternion=[float(v) for v in cam.quat],
        translation=[float(v) for v in cam.trans],
        fov_x=float(cam.fov[0]),
        fov_y=float(cam.fov[1]),
        width=int(cam.width),
        height=int(cam.height),
    )


def camera_from_dict(d):
    return geo.Camera(d["quaternion"], d["translation"], [d["fov_x"], d["fov_y"]], int(d["width"]), int(d["height"]))


def save_cameras(cameras, path):
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cameras], indent=1))


def load_cameras(path):
    return [camera_from_dict(d) for d in json.loads(Path(path).read_text())]


def cloud_to_dict(cloud: GaussianCloud):
    rows = np.concatenate(
        [
            cloud.position_sph, cloud.scale_raw, cloud.rotation,
            cloud.opacity_raw[:, None], cloud.sh.reshape(len(cloud), -1),
        ],
        axis=1,
    )
    return dict(
        field_order=list(CLOUD_FIELDS),
        sh_degree=cloud.sh_degree,
        metric_extent=None if cloud.metric_extent is None else [float(v) for v in cloud.metric_extent],
        gaussians=[[float(v) for v in row] for row in rows],
    )


def cloud_from_dict(d) -> GaussianCloud:
    rows = np.asarray(d["gaussians"], dtype=np.float64).reshape(len(d["gaussians"]), -1)
    k = geo.sh_dim(int(d["sh_degree"]))
    if rows.shape[1] != 11 + 3 * k:
        raise ValueError(f"cloud rows have {rows.shape[1]} fields, expected {11 + 3 * k}")
    return GaussianCloud(
        rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10], rows[:, 11:].reshape(-1, k, 3), d.get("metric_extent")
    )


def save_cloud(cloud, path):
    Path(path).write_text(json.dumps(cloud_to_dict(cloud)))


def load_cloud(path) -> GaussianCloud:
    return cloud_from_dict(json.loads(Path(path).read_text()))


def to_uint8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_images(images, directory, float_copy=True):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        mode = "RGBA" if img.shape[-1] == 4 else "RGB"
        Image.fromarray(to_uint8(img), mode=mode).save(directory / f"{i:04d}.png")
        if float_copy:
            np.save(directory / f"{i:04d}.npy", np.asarray(img, dtype=np.float64))


def load_images(directory):
    """Load ``NNNN`` images, preferring the lossless float copies."""
    directory = Path(directory)
    images = []
    for png in sorted(directory.glob("[0-9][0-9][0-9][0-9].png")):
        npy = png.with_suffix(".npy")
        if npy.exists():
            images.append(np.load(npy))
        else:
            images.append(np.asarray(Image.open(png), dtype=np.float64) / 255.0)
    return images


def save_dataset(ds: Dataset, directory, meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_cameras(ds.cameras, directory / "cameras.json")
    save_images(ds.images, directory / "images")
    if ds.cloud is not None:
        save_cloud(ds.cloud, directory / "cloud.json")
    info = dict(ds.meta)
    info.update(meta or {})
    info["metric_extent"] = None if ds.metric_extent is None else [float(v) for v in ds.metric_extent]
    (directory / "meta.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    cams = load_cameras(directory / "cameras.json")
    images = load_images(directory / "images")
    if len(images) != len(cams):
        raise ValueError(f"{directory}: {len(images)} images but {len(cams)} cameras")
    cloud = load_cloud(directory / "cloud.json") if (directory / "cloud.json").exists() else None
    meta = json.loads((directory / "meta.json").read_text()) if (directory / "meta.json").exists() else {}
    ext = meta.get("metric_extent")
    arr = np.stack(images) if images else np.zeros((0, 0, 0, 4))
    return Dataset(arr, cams, cloud, None if ext is None else np.asarray(ext), meta)
