import numpy as np
import pytest

from udgs_slam.geometry import CameraIntrinsics, SE3Pose
from udgs_slam.gaussian_map import GaussianMap, logit
from udgs_slam.gradcheck import random_scene
from udgs_slam.schemas import SceneSpec
from udgs_slam import synth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K16():
    return CameraIntrinsics(fx=16.0, fy=16.0, cx=8.0, cy=8.0, width=16, height=16)


@pytest.fixture
def K32():
    return CameraIntrinsics(fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32, height=32)


@pytest.fixture
def K64():
    return synth.default_intrinsics(64, 64)


@pytest.fixture
def small_scene(rng, K16):
    """A handful of splats in front of a camera near the identity."""
    return random_scene(rng, 6, K16)


@pytest.fixture
def single_splat_map():
    gmap = GaussianMap()
    gmap.add([[0.0, 0.0, 2.0]], [np.log([0.2, 0.2, 0.2])], [[1.0, 0.0, 0.0, 0.0]],
             [[0.8, 0.2, 0.1]], [logit(0.7)])
    return gmap


@pytest.fixture
def orbit_scene():
    """A dense scene with a short orbit around it, rendered at 64x64."""
    scene = synth.make_scene(SceneSpec(n_splats=200, extent=2.0, seed=7))
    poses = synth.make_orbit(3.0, 6, arc_radians=np.radians(6.0))
    K = synth.default_intrinsics(64, 64)
    return scene, poses, K


@pytest.fixture
def identity_pose():
    return SE3Pose.identity()
