import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from diffsplat.scene_io import CameraMode, CameraModel, MultiViewSet, PointSet, View

settings.register_profile(
    "local", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("local")


def lf_camera(u: float, v: float, baseline: float = 1.0) -> CameraModel:
    return CameraModel(
        np.eye(3), np.eye(3, 4), CameraMode.LIGHTFIELD_SHIFT,
        lf_u=u, lf_v=v, baseline_u=baseline, baseline_v=baseline,
    )


def lf_multiview(images, grid_uv, central_index, baseline=1.0) -> MultiViewSet:
    views = [View(img, lf_camera(u, v, baseline)) for img, (u, v) in zip(images, grid_uv)]
    return MultiViewSet(views, central_index)


def scene_to_views(scene, quantize=False) -> MultiViewSet:
    imgs = scene.images
    if quantize:
        imgs = [np.clip(np.round(im * 255), 0, 255) / 255.0 for im in imgs]
    return lf_multiview(imgs, scene.grid_uv, scene.central_index, scene.baseline)


def random_points(rng, n, shape, z_range=(1.0, 6.0), r_sigma=0.3,
                  margin=2.0) -> PointSet:
    """Random point set clear of the kernel-window half-integer boundaries so
    central differences stay inside one piece of the truncated support."""
    h, w = shape
    x = rng.uniform(margin, w - 1 - margin, n)
    y = rng.uniform(margin, h - 1 - margin, n)
    x = np.where(np.abs(x - np.floor(x) - 0.5) < 5e-3, x + 0.02, x)
    y = np.where(np.abs(y - np.floor(y) - 0.5) < 5e-3, y + 0.02, y)
    z = rng.uniform(*z_range, n)
    r = rng.normal(0.0, r_sigma, n)
    return PointSet(x, y, z, r, np.ones(n, dtype=bool))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
