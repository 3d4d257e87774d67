import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointrender.types import CameraModel, PointCloud, Pose


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera_64():
    return CameraModel(fx=60.0, fy=60.0, cx=31.5, cy=31.5, width=64, height=64)


@pytest.fixture
def identity_pose():
    return Pose(rotation=np.eye(3), translation=np.zeros(3))


@pytest.fixture
def front_pose():
    return Pose(rotation=np.eye(3), translation=np.array([0.0, 0.0, 3.0]))


@pytest.fixture
def blob_cloud(rng):
    return PointCloud(rng.normal(size=(800, 3)).astype(np.float32) * 0.6)
