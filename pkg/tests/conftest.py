import numpy as np
import pytest
from hypothesis import settings

from face4d.model import quantize_model, synth_model
from face4d.scene import synth_scene

settings.register_profile("face4d", deadline=None, max_examples=40)
settings.load_profile("face4d")


@pytest.fixture(scope="session")
def model8():
    return quantize_model(synth_model(1, 642, 8, 8, 8))


@pytest.fixture(scope="session")
def small_model():
    return quantize_model(synth_model(3, 162, 6, 6, 6))


@pytest.fixture(scope="session")
def small_scene(tmp_path_factory, small_model):
    """Noiseless 3-camera, 3-frame scene rendered from the small model."""
    root = tmp_path_factory.mktemp("scene")
    scene, params, verts = synth_scene(small_model, str(root), frames=3, cameras=3, seed=0, image_size=64)
    return scene, params, verts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def head_cloud():
    """Dense noiseless head surface samples with exact normals, about 0.3 m tall."""
    from face4d.camera import PointCloud
    from face4d.render import vertex_normals

    m = synth_model(3, 2562, 0, 0, 0)
    pts = m.mean_shape * 0.3
    return PointCloud(pts, vertex_normals(pts, m.triangles))
