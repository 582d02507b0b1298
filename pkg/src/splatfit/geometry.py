"""Coordinate frames, quaternions, the pinhole camera and SH color.

Conventions used throughout the package:

* World frame is right-handed with +z up.
* Camera frame has +z forward, +y down, +x right; the image origin is the
  top-left corner and pixel ``(u, v)`` is sampled at ``(u + 0.5, v + 0.5)``.
* Extrinsics are world-to-camera: ``x_cam = R(q) @ x_world + t``.
* Quaternions are stored ``(w, x, y, z)``.
* Spherical coordinates are ``(r, theta, phi)`` with ``theta`` the azimuth
  in the xy-plane and ``phi`` the angle measured from +z.

Everything here works on numpy arrays with arbitrary leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

NEAR_PLANE = 0.01
COV2D_BLUR = 0.3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


# ---------------------------------------------------------------------------
# Spherical coordinates
# ---------------------------------------------------------------------------

def spherical_to_cartesian(sph):
    """Map ``(..., 3)`` spherical ``(r, theta, phi)`` to Cartesian xyz."""
    sph = np.asarray(sph, dtype=np.float64)
    r, theta, phi = sph[..., 0], sph[..., 1], sph[..., 2]
    sin_phi = np.sin(phi)
    return np.stack(
        [r * sin_phi * np.cos(theta), r * sin_phi * np.sin(theta), r * np.cos(phi)],
        axis=-1,
    )


def spherical_jacobian(sph):
    """``d xyz / d (r, theta, phi)`` as a ``(..., 3, 3)`` array (rows xyz)."""
    sph = np.asarray(sph, dtype=np.float64)
    r, theta, phi = sph[..., 0], sph[..., 1], sph[..., 2]
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    jac = np.empty(sph.shape[:-1] + (3, 3))
    jac[..., 0, 0] = sp * ct
    jac[..., 1, 0] = sp * st
    jac[..., 2, 0] = cp
    jac[..., 0, 1] = -r * sp * st
    jac[..., 1, 1] = r * sp * ct
    jac[..., 2, 1] = 0.0
    jac[..., 0, 2] = r * cp * ct
    jac[..., 1, 2] = r * cp * st
    jac[..., 2, 2] = -r * sp
    return jac


def cartesian_to_spherical(xyz):
    """Inverse of :func:`spherical_to_cartesian`.

    The origin maps to ``(0, 0, 0)``. ``theta`` is returned in ``(-pi, pi]``
    and ``phi`` in ``[0, pi]``.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    theta = np.arctan2(y, x)
    # arctan2 of the in-plane radius is better conditioned than arccos(z / r)
    phi = np.arctan2(np.sqrt(x * x + y * y), z)
    return np.stack([r, theta, phi], axis=-1)


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrix of a (possibly non-unit) quaternion ``(w, x, y, z)``."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    rot = np.empty(np.shape(w) + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def rotmat_grad_to_quat(q, grad_rot):
    """Pull a gradient w.r.t. ``quat_to_rotmat(q)`` back to the raw ``q``.

    Includes the normalization step, so the result is orthogonal to ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    g = grad_rot
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    g_unit = np.stack([gw, gx, gy, gz], axis=-1)
    q_unit = q / norm
    radial = np.sum(g_unit * q_unit, axis=-1, keepdims=True)
    return (g_unit - radial * q_unit) / norm


def rotmat_to_quat(rot):
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix."""
    rot = np.asarray(rot, dtype=np.float64)
    m = rot
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * np.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def quat_multiply(a, b):
    """Hamilton product ``a * b``; ``R(a * b) = R(a) @ R(b)``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def geodesic_angle(q1, q2):
    """Rotation angle (radians) between two quaternions, sign-invariant."""
    dot = np.abs(np.sum(quat_normalize(q1) * quat_normalize(q2), axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera with principal point at the image center.

    Attributes:
        quat: world-to-camera rotation ``(w, x, y, z)``.
        trans: world-to-camera translation ``t``.
        fov: ``(fov_x, fov_y)`` in radians.
        width, height: image size in pixels.
    """

    quat: np.ndarray
    trans: np.ndarray
    fov: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "quat", np.asarray(self.quat, dtype=np.float64).reshape(4))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))
        object.__setattr__(self, "fov", np.asarray(self.fov, dtype=np.float64).reshape(2))
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not np.all((self.fov > 0) & (self.fov < np.pi)):
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")

    @property
    def rotmat(self):
        return quat_to_rotmat(self.quat)

    @property
    def center(self):
        return -self.rotmat.T @ self.trans

    @property
    def focal(self):
        size = np.array([self.width, self.height], dtype=np.float64)
        return 0.5 * size / np.tan(0.5 * self.fov)

    @property
    def principal_point(self):
        return np.array([0.5 * self.width, 0.5 * self.height])

    def replace(self, **changes) -> "Camera":
        return replace(self, **changes)

    @classmethod
    def look_at(cls, position, target, fov, width, height, up=(0.0, 0.0, 1.0)):
        """Camera at ``position`` looking at ``target`` with roll fixed by ``up``.

        Straight up/down views fall back to +x as the up hint.
        """
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward = forward / np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])  # rows: camera axes in world
        fov = np.broadcast_to(np.asarray(fov, dtype=np.float64), (2,))
        return cls(rotmat_to_quat(rot), -rot @ position, fov, int(width), int(height))


def focal_from_fov(fov, size):
    return 0.5 * size / np.tan(0.5 * fov)


def world_to_camera(points, cam: Camera):
    return np.asarray(points, dtype=np.float64) @ cam.rotmat.T + cam.trans


def project_points(points, cam: Camera):
    """Pinhole projection of world points to pixel coordinates."""
    pc = world_to_camera(points, cam)
    return cam.focal * pc[..., :2] / pc[..., 2:3] + cam.principal_point


def project_gaussian(mean, cov3d, cam: Camera):
    """EWA projection of one or many 3D Gaussians.

    Returns ``(mean2d, cov2d, depth)``. Gaussians with camera depth at or
    below the near plane are culled: their ``mean2d``/``cov2d`` entries are
    NaN rather than raising.
    """
    mean = np.asarray(mean, dtype=np.float64)
    cov3d = np.asarray(cov3d, dtype=np.float64)
    rot = cam.rotmat
    pc = mean @ rot.T + cam.trans
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    fx, fy = cam.focal
    culled = z <= NEAR_PLANE
    zs = np.where(culled, 1.0, z)
    mean2d = np.stack([fx * x / zs + 0.5 * cam.width, fy * y / zs + 0.5 * cam.height], axis=-1)
    jac = np.zeros(z.shape + (2, 3))
    jac[..., 0, 0] = fx / zs
    jac[..., 0, 2] = -fx * x / zs**2
    jac[..., 1, 1] = fy / zs
    jac[..., 1, 2] = -fy * y / zs**2
    tmat = jac @ rot
    cov2d = tmat @ cov3d @ np.swapaxes(tmat, -1, -2) + COV2D_BLUR * np.eye(2)
    mean2d = np.where(culled[..., None], np.nan, mean2d)
    cov2d = np.where(culled[..., None, None], np.nan, cov2d)
    return mean2d, cov2d, z


# ---------------------------------------------------------------------------
# Spherical harmonics (degree <= 1)
# ---------------------------------------------------------------------------

def sh_basis(dirs, degree):
    """Real SH basis ``(..., (degree+1)**2)`` in the usual splatting sign convention."""
    dirs = np.asarray(dirs, dtype=np.float64)
    if degree not in (0, 1):
        raise ValueError(f"SH degree must be 0 or 1, got {degree}")
    c0 = np.full(dirs.shape[:-1] + (1,), SH_C0)
    if degree == 0:
        return c0
    x, y, z = dirs[..., 0:1], dirs[..., 1:2], dirs[..., 2:3]
    return np.concatenate([c0, -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1)


def sh_eval(coeffs, view_dir, degree, clamp=True):
    """View-dependent RGB from SH coefficients of shape ``(..., k, 3)``.

    ``k`` may exceed ``(degree+1)**2``; extra bands are ignored.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = sh_basis(view_dir, degree)
    nb = basis.shape[-1]
    rgb = np.einsum("...k,...kc->...c", basis, coeffs[..., :nb, :])
    return np.clip(rgb, 0.0, 1.0) if clamp else rgb


def sh_dim(degree):
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# Misc
# ---------------------------------------------------------------------------

def positional_encoding(x, channels):
    """Sinusoidal encoding ``[sin(x f_i), cos(x f_i)]`` interleaved, ``i = 1..C/2``.

    ``f_i = 10000 ** (-i / (C/2))``.
    """
    if channels % 2:
        raise ValueError(f"channel count must be even, got {channels}")
    half = channels // 2
    freqs = 10000.0 ** (-np.arange(1, half + 1) / half)
    arg = np.asarray(x, dtype=np.float64)[..., None] * freqs
    out = np.empty(arg.shape[:-1] + (channels,))
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


@dataclass(frozen=True)
class BBox3:
    """Axis-aligned box size along x, y, z."""

    extent: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        ext = np.asarray(self.extent, dtype=np.float64).reshape(3)
        if np.any(ext < 0):
            raise ValueError(f"extents must be non-negative, got {ext}")
        object.__setattr__(self, "extent", ext)


def compute_bbox(positions) -> BBox3:
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot compute the bounding box of an empty point set")
    return BBox3(pts.max(axis=0) - pts.min(axis=0))
