import math

import numpy as np
import pytest

from conftest import random_camera, random_cloud
from splatfit import geometry as geo
from splatfit import render as render_mod
from splatfit.grad import GradientSet, backward_render, finite_diff_grad, gradcheck, relative_error
from splatfit.render import GaussianCloud, rasterize


def linear_loss(shape, seed=0):
    rng = np.random.default_rng(seed)
    w_rgb = rng.uniform(-1, 1, size=shape + (3,))
    w_a = rng.uniform(-1, 1, size=shape)

    def loss(rgb, alpha):
        return float(np.sum(w_rgb * rgb) + np.sum(w_a * alpha)), w_rgb, w_a

    return loss


def quadratic_loss(target):
    def loss(rgb, alpha):
        d = rgb - target
        return float(np.sum(d * d)), 2 * d

    return loss


@pytest.mark.parametrize("seed", range(4))
def test_gradcheck_random_scene(seed):
    rng = np.random.default_rng(100 + seed)
    cloud = random_cloud(rng, 6, sh_degree=seed % 2)
    cam = random_camera(rng, 16)
    loss = linear_loss((16, 16), seed) if seed % 2 else quadratic_loss(rng.uniform(size=(16, 16, 3)))
    report = gradcheck(cloud, cam, loss)
    assert report.passed, report.to_dict()
    checked, skipped = sum(report.n_checked.values()), sum(report.n_skipped.values())
    assert skipped <= 0.1 * (checked + skipped)


def test_zero_upstream_gives_exact_zero(rng):
    cloud = random_cloud(rng, 5)
    cam = random_camera(rng, 16)
    out = rasterize(cloud, cam)
    g = backward_render(cloud, cam, out, np.zeros((16, 16, 3)), np.zeros((16, 16)))
    for name, arr in g.items():
        assert np.all(arr == 0.0), name


def test_pixel_outside_footprints_has_zero_gradient():
    cam = geo.Camera([1.0, 0, 0, 0], [0, 0, 0], [math.pi / 2] * 2, 16, 16)
    cloud = GaussianCloud.from_activated([[0.0, 0.0, 2.0]], 0.03, [1, 0, 0, 0], 0.7, colors=[[0.3, 0.6, 0.2]])
    out = rasterize(cloud, cam)
    assert out.contributors(0, 0) == []
    g_img = np.zeros((16, 16, 3))
    g_img[0, 0] = [1.0, -2.0, 3.0]
    g_alpha = np.zeros((16, 16))
    g_alpha[0, 0] = 5.0
    g = backward_render(cloud, cam, out, g_img, g_alpha)
    for name, arr in g.items():
        assert np.all(arr == 0.0), name


def test_single_gaussian_red_channel_hand_derivation():
    """dL/d(DC red) = C0 * weight of the one contribution at that pixel."""
    cam = geo.Camera([1.0, 0, 0, 0], [0, 0, 0], [math.pi / 2] * 2, 16, 16)
    cloud = GaussianCloud.from_activated([[0.05, -0.02, 2.0]], 0.08, [1, 0, 0, 0], 0.6, colors=[[0.4, 0.5, 0.6]])
    out = rasterize(cloud, cam)
    (rec,) = out.contributors(8, 7)
    g_img = np.zeros((16, 16, 3))
    g_img[7, 8, 0] = 1.0
    g = backward_render(cloud, cam, out, g_img)
    weight = rec["alpha"] * rec["transmittance"]
    assert g.sh[0, 0, 0] == pytest.approx(geo.SH_C0 * weight, rel=1e-14)
    assert g.sh[0, 0, 1] == 0.0 and g.sh[0, 0, 2] == 0.0


def test_buffers_must_match(rng):
    cloud = random_cloud(rng, 3)
    cam = random_camera(rng, 16)
    out = rasterize(cloud, cam)
    other = cam.replace(trans=cam.trans + 0.01)
    with pytest.raises(ValueError):
        backward_render(cloud, other, out, np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        backward_render(cloud, cam, out, np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        backward_render(random_cloud(rng, 4), cam, out, np.zeros((16, 16, 3)))


# --- finite differences ------------------------------------------------------

def test_fd_exact_for_quadratic_in_sh(rng):
    """rgb is linear in the SH coefficients (no clamping), so central differences are exact."""
    cloud = random_cloud(rng, 4, sh_degree=1)
    cloud = cloud.replace(sh=cloud.sh * 0.2 + np.array([0.5 / geo.SH_C0, 0, 0, 0])[None, :, None])
    cam = random_camera(rng, 12)
    out = rasterize(cloud, cam)
    proj = out.proj
    assert np.all((proj.color_raw > 0) & (proj.color_raw < 1))
    target = rng.uniform(size=(12, 12, 3))
    loss = quadratic_loss(target)
    fd = finite_diff_grad(cloud, cam, lambda r, a: loss(r, a)[0], h=1e-3, params=("sh",))
    g = backward_render(cloud, cam, out, loss(out.rgb, out.alpha)[1])
    np.testing.assert_allclose(fd.grads.sh, g.sh, atol=1e-9)


def test_fd_error_shrinks_quadratically():
    cam = geo.Camera([1.0, 0, 0, 0], [0, 0, 0], [math.pi / 2] * 2, 16, 16)
    cloud = GaussianCloud.from_activated([[0.05, -0.02, 2.0]], 0.3, [1, 0, 0, 0], 0.6, colors=[[0.4, 0.5, 0.6]])
    target = np.full((16, 16, 3), 0.2)
    loss = quadratic_loss(target)
    out = rasterize(cloud, cam)
    exact = backward_render(cloud, cam, out, loss(out.rgb, out.alpha)[1]).opacity_raw[0]
    errs = []
    for h in (0.2, 0.1):
        fd = finite_diff_grad(cloud, cam, lambda r, a: loss(r, a)[0], h=h, params=("opacity_raw",))
        errs.append(abs(fd.grads.opacity_raw[0] - exact))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_fd_quaternion_gradient_is_tangent(rng):
    cloud = random_cloud(rng, 3)
    cam = random_camera(rng, 12)
    loss = linear_loss((12, 12))
    fd = finite_diff_grad(cloud, cam, lambda r, a: loss(r, a)[0], params=("rotation", "cam_quat"))
    q = geo.quat_normalize(cloud.rotation)
    ok = np.all(np.isfinite(fd.grads.rotation), axis=1)
    np.testing.assert_allclose(np.sum(fd.grads.rotation[ok] * q[ok], axis=1), 0.0, atol=1e-12)
    assert abs(fd.grads.cam_quat @ cam.quat) < 1e-12


def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)
    assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
    assert relative_error(-1.0, 1.0) == pytest.approx(2.0)


def test_gradcheck_infinite_tolerance_always_passes(rng):
    cloud = random_cloud(rng, 3)
    cam = random_camera(rng, 12)
    bogus = GradientSet.zeros(cloud)
    bogus.sh[:] = 1e6
    report = gradcheck(cloud, cam, linear_loss((12, 12)), tol=math.inf, analytic=bogus)
    assert report.passed


def test_fault_injection_localized_to_sh(rng):
    cloud = random_cloud(rng, 4, sh_degree=1)
    cam = random_camera(rng, 16)
    loss = linear_loss((16, 16))
    out = rasterize(cloud, cam)
    _, g_rgb, g_a = loss(out.rgb, out.alpha)
    analytic = backward_render(cloud, cam, out, g_rgb, g_a)
    analytic.sh[1, 2, 0] += 0.5
    report = gradcheck(cloud, cam, loss, analytic=analytic)
    assert not report.passed
    assert report.failing() == ["sh"]
    assert report.worst_index["sh"] == (1, 2, 0)


# --- camera path decomposition ----------------------------------------------

def test_camera_paths_sum_to_total(rng):
    for _ in range(5):
        cloud = random_cloud(rng, 8)
        cam = random_camera(rng, 20)
        out = rasterize(cloud, cam)
        _, g_rgb, g_a = linear_loss((20, 20))(out.rgb, out.alpha)
        g = backward_render(cloud, cam, out, g_rgb, g_a)
        for key in ("cam_quat", "cam_trans", "cam_fov"):
            total = sum(g.camera_paths[p][key] for p in ("mean", "cov", "color"))
            np.testing.assert_allclose(total, getattr(g, key), rtol=0, atol=1e-12)


def _split_render(monkeypatch, cloud, cams, loss):
    """Render where means, covariances and view directions each see their own camera."""
    original = render_mod._project_all

    def patched(c, _cam):
        means, cov3d, pc, jac, mean2d, _ = original(c, cams["mean"])
        cov2d = original(c, cams["cov"])[5]
        return means, cov3d, pc, jac, mean2d, cov2d

    monkeypatch.setattr(render_mod, "_project_all", patched)
    try:
        out = rasterize(cloud, cams["color"])
    finally:
        monkeypatch.setattr(render_mod, "_project_all", original)
    return loss(out.rgb, out.alpha)[0]


def test_camera_paths_match_isolated_finite_differences(rng, monkeypatch):
    cloud = random_cloud(rng, 6, sh_degree=1)
    cam = random_camera(rng, 16)
    loss = linear_loss((16, 16))
    out = rasterize(cloud, cam)
    _, g_rgb, g_a = loss(out.rgb, out.alpha)
    g = backward_render(cloud, cam, out, g_rgb, g_a)
    h = 1e-6
    fields = {"cam_quat": "quat", "cam_trans": "trans", "cam_fov": "fov"}
    for path in ("mean", "cov", "color"):
        for key, attr in fields.items():
            base = getattr(cam, attr)
            fd = np.zeros_like(base)
            for k in range(base.size):
                vals = []
                for sign in (1, -1):
                    x = base.copy()
                    x[k] += sign * h
                    if attr == "quat":
                        x = x / np.linalg.norm(x)
                    cams = {p: cam for p in ("mean", "cov", "color")}
                    cams[path] = cam.replace(**{attr: x})
                    vals.append(_split_render(monkeypatch, cloud, cams, loss))
                fd[k] = (vals[0] - vals[1]) / (2 * h)
            if attr == "quat":
                fd = fd - (fd @ cam.quat) * cam.quat
            analytic = g.camera_paths[path][key]
            scale = max(np.abs(fd).max(), np.abs(analytic).max(), 1e-8)
            assert np.abs(analytic - fd).max() / scale < 1e-5, (path, key, analytic, fd)


def test_skipped_quaternion_probe_leaves_other_components_intact():
    """A scene where one camera-quaternion probe crosses a truncation boundary at h=1e-5."""
    rng = np.random.default_rng(5004)
    cloud = random_cloud(rng, int(rng.integers(4, 17)), sh_degree=0)
    cam = random_camera(rng, 32)
    loss = linear_loss((32, 32), 4)
    fd = finite_diff_grad(cloud, cam, lambda r, a: loss(r, a)[0], h=1e-5, params=("cam_quat",))
    assert fd.skipped["cam_quat"].any()
    out = rasterize(cloud, cam)
    _, g_rgb, g_a = loss(out.rgb, out.alpha)
    analytic = backward_render(cloud, cam, out, g_rgb, g_a).cam_quat
    ok = ~fd.skipped["cam_quat"]
    assert relative_error(analytic[ok], fd.grads.cam_quat[ok]).max() < 1e-4
