import numpy as np
import pytest

from bevloop.bev import BevConfig, rasterize
from bevloop.contour import ContourAbstraction, eig2x2
from bevloop.dataset import SceneParams, generate_scene

SCENE_SEED = 7


def build_ca(
    level=2,
    seq=1,
    x_c=(0.0, 0.0),
    n_a=50,
    h_m=1.0,
    cov=((4.0, 0.0), (0.0, 1.0)),
    ecc=0.5,
):
    x_c = np.asarray(x_c, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    v1, v2, lam1, lam2 = eig2x2(cov)
    return ContourAbstraction(
        level=level,
        seq=seq,
        n_a=n_a,
        h_m=h_m,
        x_c=x_c,
        x_m=x_c + np.array([ecc, 0.0]),
        cov=cov,
        v1=v1,
        v2=v2,
        lam1=lam1,
        lam2=lam2,
        ecc_feat=ecc,
    )


@pytest.fixture()
def make_ca():
    return build_ca


@pytest.fixture(scope="session")
def small_bev():
    return BevConfig(half_extent_x=40.0, half_extent_y=40.0)


@pytest.fixture(scope="session")
def scene_params():
    return SceneParams(extent=30.0, min_blobs=25, max_blobs=35)


@pytest.fixture(scope="session")
def scene(scene_params):
    return generate_scene(SCENE_SEED, scene_params)


@pytest.fixture(scope="session")
def scene_cloud(scene):
    return scene[1]


@pytest.fixture(scope="session")
def scene_image(scene_cloud, small_bev):
    return rasterize(scene_cloud, small_bev)
