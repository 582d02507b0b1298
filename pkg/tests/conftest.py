import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatfit import geometry as geo
from splatfit.render import GaussianCloud

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_cloud(rng, n, sh_degree=1, spread=0.3, scale=(0.03, 0.1), opacity=(0.3, 0.9)):
    """Small random scene around the origin with well-separated attributes."""
    means = rng.uniform(-spread, spread, size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    k = geo.sh_dim(sh_degree)
    sh = rng.normal(scale=0.4, size=(n, k, 3))
    sh[:, 0] = rng.uniform(0.3, 0.8, size=(n, 3)) / geo.SH_C0
    return GaussianCloud.from_activated(
        means, rng.uniform(*scale, size=(n, 3)), q, rng.uniform(*opacity, size=n), sh=sh
    )


def random_camera(rng, size=32, distance=(1.3, 1.8)):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    pos = d * rng.uniform(*distance)
    target = rng.uniform(-0.05, 0.05, size=3)
    cam = geo.Camera.look_at(pos, target, rng.uniform(0.8, 1.2), size, size)
    return cam.replace(fov=cam.fov * np.array([1.0, rng.uniform(0.9, 1.1)]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
