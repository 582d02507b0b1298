import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import sph_harm_y
from scipy.spatial.transform import Rotation

from conftest import random_camera
from splatfit import geometry as geo

finite = st.floats(-1.0, 1.0, allow_nan=False)
quats = st.tuples(finite, finite, finite, finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


# --- spherical coordinates -------------------------------------------------

@pytest.mark.parametrize(
    "sph, expected",
    [
        ((1.0, 0.0, math.pi / 2), (1.0, 0.0, 0.0)),
        ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        ((2.0, math.pi / 2, math.pi / 2), (0.0, 2.0, 0.0)),
    ],
)
def test_spherical_to_cartesian_axes(sph, expected):
    np.testing.assert_allclose(geo.spherical_to_cartesian(sph), expected, atol=1e-15)


@pytest.mark.parametrize(
    "xyz, expected",
    [((0.0, 0.0, 1.0), (1.0, 0.0, 0.0)), ((1.0, 0.0, 0.0), (1.0, 0.0, math.pi / 2))],
)
def test_cartesian_to_spherical_axes(xyz, expected):
    np.testing.assert_allclose(geo.cartesian_to_spherical(xyz), expected, atol=1e-15)


def test_spherical_round_trip_many(rng):
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    v = d * 10.0 ** rng.uniform(-3, 3, size=(10_000, 1))
    back = geo.spherical_to_cartesian(geo.cartesian_to_spherical(v))
    np.testing.assert_allclose(back, v, rtol=0, atol=1e-9 * np.abs(v).max())
    assert np.all(np.abs(back - v) <= 1e-9 * np.linalg.norm(v, axis=1, keepdims=True))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_spherical_round_trip_property(logr, a, b):
    sph = np.array([10.0**logr, a, abs(b) % math.pi])
    v = geo.spherical_to_cartesian(sph)
    back = geo.spherical_to_cartesian(geo.cartesian_to_spherical(v))
    assert np.linalg.norm(back - v) <= 1e-9 * np.linalg.norm(v)


def test_spherical_jacobian_matches_central_differences(rng):
    sph = np.column_stack([rng.uniform(0.2, 2, 20), rng.uniform(-3, 3, 20), rng.uniform(0.1, 3, 20)])
    jac = geo.spherical_jacobian(sph)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (geo.spherical_to_cartesian(sph + e) - geo.spherical_to_cartesian(sph - e)) / (2 * h)
        np.testing.assert_allclose(jac[:, :, k], fd, atol=1e-8)


# --- quaternions -------------------------------------------------------------

def test_identity_quaternion_is_identity_matrix():
    np.testing.assert_array_equal(geo.quat_to_rotmat([1.0, 0, 0, 0]), np.eye(3))


def test_quarter_turn_about_z():
    q = geo.quat_from_axis_angle([0, 0, 1], math.pi / 2)
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(geo.quat_to_rotmat(q), expected, atol=1e-15)


@given(quats)
def test_quaternion_sign_invariance(q):
    q = np.array(q)
    np.testing.assert_allclose(geo.quat_to_rotmat(q), geo.quat_to_rotmat(-q), atol=1e-12, rtol=0)


@given(quats)
def test_rotmat_matches_scipy(q):
    """scipy stores (x, y, z, w); an independent construction of the same matrix."""
    q = np.array(q)
    ref = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    np.testing.assert_allclose(geo.quat_to_rotmat(q), ref, atol=1e-12)


@given(quats)
def test_rotmat_to_quat_round_trip(q):
    q = geo.quat_normalize(np.array(q))
    back = geo.rotmat_to_quat(geo.quat_to_rotmat(q))
    assert back[0] >= 0
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9
    np.testing.assert_allclose(geo.quat_to_rotmat(back), geo.quat_to_rotmat(q), atol=1e-12)


def test_geodesic_angle_of_known_rotation(rng):
    for _ in range(20):
        axis = rng.normal(size=3)
        angle = rng.uniform(0, math.pi)
        q0 = geo.quat_normalize(rng.normal(size=4))
        q1 = geo.quat_multiply(geo.quat_from_axis_angle(axis, angle), q0)
        assert geo.geodesic_angle(q0, q1) == pytest.approx(angle, abs=1e-7)
        assert geo.geodesic_angle(q0, -q1) == pytest.approx(angle, abs=1e-7)


def test_quat_multiply_composes_rotations(rng):
    a, b = geo.quat_normalize(rng.normal(size=(2, 4)))
    np.testing.assert_allclose(
        geo.quat_to_rotmat(geo.quat_multiply(a, b)), geo.quat_to_rotmat(a) @ geo.quat_to_rotmat(b), atol=1e-12
    )


def test_rotmat_grad_to_quat_matches_finite_differences(rng):
    q = rng.normal(size=(5, 4))
    g_rot = rng.normal(size=(5, 3, 3))

    def f(qq):
        return np.sum(g_rot * geo.quat_to_rotmat(geo.quat_normalize(qq)), axis=(1, 2))

    analytic = geo.rotmat_grad_to_quat(q, g_rot)
    h = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        np.testing.assert_allclose(analytic[:, k], (f(q + e) - f(q - e)) / (2 * h), atol=1e-7)


# --- camera and projection ---------------------------------------------------

def test_focal_from_fov():
    assert geo.focal_from_fov(math.pi / 2, 64) == pytest.approx(32.0)
    cam = geo.Camera([1, 0, 0, 0], [0, 0, 2], [math.pi / 2, math.pi / 3], 64, 48)
    np.testing.assert_allclose(cam.focal, [32.0, 24.0 / math.tan(math.pi / 6)])


def test_look_at_conventions():
    cam = geo.Camera.look_at([2.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1.0, 32, 32)
    np.testing.assert_allclose(cam.center, [2, 0, 0], atol=1e-12)
    rot = cam.rotmat
    np.testing.assert_allclose(rot[2], [-1, 0, 0], atol=1e-12)  # forward
    np.testing.assert_allclose(rot[1], [0, 0, -1], atol=1e-12)  # image down = world -z
    # the world up direction maps above the image center
    uv = geo.project_points(np.array([[0.0, 0.0, 0.1]]), cam)[0]
    assert uv[1] < 16.0
    np.testing.assert_allclose(geo.project_points(np.zeros((1, 3)), cam)[0], [16, 16], atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        geo.Camera([1, 0, 0, 0], [0, 0, 0], [0.0, 1.0], 8, 8)
    with pytest.raises(ValueError):
        geo.Camera([1, 0, 0, 0], [0, 0, 0], [1.0, 1.0], 0, 8)


def _axis_camera(fov=math.pi / 2, size=64):
    return geo.Camera([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [fov, fov], size, size)


def test_mean_on_optical_axis_projects_to_center():
    mean2d, _, depth = geo.project_gaussian(np.array([0.0, 0.0, 3.0]), np.eye(3) * 0.01, _axis_camera())
    np.testing.assert_allclose(mean2d, [32.0, 32.0])
    assert depth == 3.0


def test_isotropic_covariance_on_axis_hand_value():
    s2 = 0.04
    z = 2.0
    cam = _axis_camera()
    _, cov2d, _ = geo.project_gaussian(np.array([0.0, 0.0, z]), np.eye(3) * s2, cam)
    f = 32.0
    np.testing.assert_allclose(cov2d, np.eye(2) * (f**2 * s2 / z**2 + 0.3), rtol=1e-14)


def test_doubling_fov_moves_point_toward_center():
    x = np.array([0.3, 0.0, 2.0])
    narrow = _axis_camera(fov=0.8)
    wide = _axis_camera(fov=2 * 0.8)
    m_n, _, _ = geo.project_gaussian(x, np.eye(3) * 1e-4, narrow)
    m_w, _, _ = geo.project_gaussian(x, np.eye(3) * 1e-4, wide)
    ratio = math.tan(0.4) / math.tan(0.8)
    assert wide.focal[0] == pytest.approx(narrow.focal[0] * ratio)
    assert m_w[0] - 32.0 == pytest.approx((m_n[0] - 32.0) * ratio)


def test_project_gaussian_culls_behind_near_plane():
    mean2d, cov2d, depth = geo.project_gaussian(np.array([[0, 0, 0.005], [0, 0, -1.0], [0, 0, 1.0]]), np.eye(3) * 0.01, _axis_camera())
    assert np.isnan(mean2d[:2]).all() and np.isnan(cov2d[:2]).all()
    assert np.isfinite(mean2d[2]).all()


def test_projection_consistency_and_blur_floor(rng):
    for _ in range(10):
        cam = random_camera(rng, 48)
        means = rng.uniform(-0.4, 0.4, size=(30, 3))
        a = rng.normal(size=(30, 3, 3)) * 0.05
        cov = a @ np.swapaxes(a, 1, 2)
        mean2d, cov2d, _ = geo.project_gaussian(means, cov, cam)
        np.testing.assert_allclose(mean2d, geo.project_points(means, cam), atol=1e-10)
        assert np.all(np.linalg.eigvalsh(cov2d) >= 0.3 - 1e-12)


def test_projected_covariance_matches_numerical_jacobian(rng):
    """Linearize the pinhole map by finite differences and push the covariance through it."""
    cam = random_camera(rng, 40)
    mean = np.array([0.05, -0.1, 0.08])
    a = rng.normal(size=(3, 3)) * 0.05
    cov = a @ a.T
    h = 1e-6
    jac = np.column_stack(
        [(geo.project_points(mean + h * e, cam) - geo.project_points(mean - h * e, cam)) / (2 * h) for e in np.eye(3)]
    )
    _, cov2d, _ = geo.project_gaussian(mean, cov, cam)
    np.testing.assert_allclose(cov2d, jac @ cov @ jac.T + 0.3 * np.eye(2), rtol=1e-6)


# --- spherical harmonics -----------------------------------------------------

def test_degree0_constant_over_directions(rng):
    coeffs = np.full((1, 3), 0.5)
    dirs = rng.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = geo.sh_eval(np.broadcast_to(coeffs, (50, 1, 3)), dirs, 0)
    np.testing.assert_allclose(out, 0.5 * geo.SH_C0)


def test_degree1_band_is_odd(rng):
    coeffs = rng.normal(size=(4, 3))
    d = geo.quat_normalize(rng.normal(size=4))[1:]
    d /= np.linalg.norm(d)
    band = coeffs.copy()
    band[0] = 0
    plus = geo.sh_eval(band, d, 1, clamp=False)
    minus = geo.sh_eval(band, -d, 1, clamp=False)
    np.testing.assert_allclose(plus, -minus, atol=1e-15)


def _real_sh_oracle(dirs):
    """Real SH from scipy's complex harmonics with the Condon-Shortley phase."""
    x, y, z = dirs.T
    polar = np.arccos(np.clip(z, -1, 1))
    azim = np.arctan2(y, x)
    y00 = sph_harm_y(0, 0, polar, azim).real
    y11 = sph_harm_y(1, 1, polar, azim)
    return np.column_stack([y00, math.sqrt(2) * y11.imag, sph_harm_y(1, 0, polar, azim).real, math.sqrt(2) * y11.real])


def test_sh_matches_scipy_oracle(rng):
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    coeffs = rng.normal(size=(200, 4, 3))
    basis = _real_sh_oracle(dirs)
    np.testing.assert_allclose(geo.sh_basis(dirs, 1), basis, atol=1e-12)
    expected = np.einsum("nk,nkc->nc", basis, coeffs)
    np.testing.assert_allclose(geo.sh_eval(coeffs, dirs, 1, clamp=False), expected, atol=1e-12)
    np.testing.assert_allclose(geo.sh_eval(coeffs, dirs, 1), np.clip(expected, 0, 1), atol=1e-12)


def test_sh_rejects_degree_two():
    with pytest.raises(ValueError):
        geo.sh_basis(np.array([0.0, 0.0, 1.0]), 2)


# --- positional encoding and boxes ------------------------------------------

def test_positional_encoding_zero():
    np.testing.assert_array_equal(geo.positional_encoding(0.0, 6), [0, 1, 0, 1, 0, 1])


def test_positional_encoding_direct_evaluation():
    out = geo.positional_encoding(1.0, 4)
    f1, f2 = 10000.0 ** (-1 / 2), 10000.0 ** (-2 / 2)
    np.testing.assert_allclose(out, [math.sin(f1), math.cos(f1), math.sin(f2), math.cos(f2)])


@given(st.floats(-1e4, 1e4), st.integers(1, 16))
def test_positional_encoding_bounded(x, half):
    out = geo.positional_encoding(x, 2 * half)
    assert out.shape == (2 * half,)
    assert np.all(np.abs(out) <= 1.0)


def test_positional_encoding_odd_channels():
    with pytest.raises(ValueError):
        geo.positional_encoding(1.0, 5)


def test_bbox_cases(rng):
    np.testing.assert_array_equal(geo.compute_bbox([[1.0, 2.0, 3.0]]).extent, [0, 0, 0])
    np.testing.assert_array_equal(geo.compute_bbox([[0, 0, 0], [1, 2, 3]]).extent, [1, 2, 3])
    pts = rng.normal(size=(100, 3))
    lo = [min(p[k] for p in pts) for k in range(3)]
    hi = [max(p[k] for p in pts) for k in range(3)]
    np.testing.assert_array_equal(geo.compute_bbox(pts).extent, np.subtract(hi, lo))
    with pytest.raises(ValueError):
        geo.compute_bbox(np.zeros((0, 3)))
