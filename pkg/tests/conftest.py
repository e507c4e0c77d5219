import numpy as np
import pytest

from mvacon.config import make_config
from mvacon.geometry import Camera, CameraRig, SceneRange, intrinsics, look_at
from mvacon.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def random_camera(rng, width=32, height=24):
    """A camera somewhere around the origin looking roughly at it."""
    pos = rng.uniform(-6, 6, size=3)
    pos[1] = rng.uniform(0.5, 2.5)
    target = rng.uniform(-1, 1, size=3)
    f = rng.uniform(20, 40)
    K = intrinsics(f, f * rng.uniform(0.9, 1.1), width / 2 + rng.uniform(-2, 2), height / 2 + rng.uniform(-2, 2))
    return Camera(K, look_at(pos, target), width, height)


def random_rig(rng, views=2, width=32, height=24):
    return CameraRig(tuple(random_camera(rng, width, height) for _ in range(views)), SceneRange())


def small_config(mode="bevformer", **training):
    return make_config({
        "scene": {"cameras": 2, "image_size": [32, 32], "objects": 2},
        "model": {"channels": 8, "strides": [4, 8],
                  "mvacon": {"clusters": 4, "heads": 2, "layers": 1},
                  "lift": {"mode": mode, "layers": 2, "sample_points": 2, "d": 8, "D": 2},
                  "head": {"queries": 4, "layers": 1},
                  "bev": {"nx": 4, "nz": 4, "pillar_count": 2}},
        "training": dict({"steps": 3}, **training),
    })
