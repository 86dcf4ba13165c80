import numpy as np
import pytest

from hdr4dgs.camera import Camera
from hdr4dgs.datagen import SceneSpec, write_dataset
from hdr4dgs.scene import Gaussian4DCloud


def random_cloud(rng, n=10, spread=0.6, scale=(0.08, 0.3), sh_scale=0.3):
    cloud = Gaussian4DCloud.zeros(n, sh_degree=2, n_fourier=2)
    cloud.mean4[:, :3] = rng.uniform(-spread, spread, (n, 3))
    cloud.mean4[:, 3] = rng.uniform(0.2, 0.8, n)
    cloud.log_scale4[:, :3] = np.log(rng.uniform(scale[0], scale[1], (n, 3)))
    cloud.log_scale4[:, 3] = np.log(rng.uniform(0.2, 0.6, n))
    cloud.quat_left = rng.normal(size=(n, 4))
    cloud.quat_right = rng.normal(size=(n, 4))
    cloud.raw_opacity = rng.uniform(-1.5, 2.5, n)
    cloud.sh_coeffs = rng.normal(scale=sh_scale, size=cloud.sh_coeffs.shape)
    return cloud


def front_camera(size=16, distance=3.0):
    return Camera.look_at((0.0, 0.3, -distance), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), 50.0, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_spec():
    return SceneSpec(timesteps=4, cameras=2, size=16, supersample=1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_spec):
    out = tmp_path_factory.mktemp("tiny_ds")
    return write_dataset(tiny_spec, out, with_hdr=True, pattern="stereo", split_policy="interleave")


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """The bundled default scene: 64x64, T=20, Q=5, P=3, stereo pattern."""
    out = tmp_path_factory.mktemp("desk_ds")
    return write_dataset(SceneSpec(), out, with_hdr=True, pattern="stereo", split_policy="interleave")
