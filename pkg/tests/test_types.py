import numpy as np
import pytest

from pointrender import CameraModel, ConfigError, DataError, PointCloud, Pose, SplitSpec


def test_camera_rejects_bad_focal():
    with pytest.raises(ConfigError):
        CameraModel(fx=0.0, fy=50.0, cx=10, cy=10, width=32, height=32)
    with pytest.raises(ConfigError):
        CameraModel(fx=50.0, fy=-1.0, cx=10, cy=10, width=32, height=32)


def test_camera_principal_point_rules():
    # off-frame principal points are allowed (crop-derived cameras need them)
    c = CameraModel(fx=50, fy=50, cx=-10.0, cy=40.0, width=32, height=32)
    assert not c.principal_point_inside()
    assert CameraModel(fx=50, fy=50, cx=0, cy=31.9, width=32, height=32).principal_point_inside()
    with pytest.raises(ConfigError):
        CameraModel(fx=50, fy=50, cx=float("nan"), cy=10, width=32, height=32)


def test_pose_orthonormality_enforced():
    with pytest.raises(DataError):
        Pose(rotation=np.eye(3) * 1.01, translation=np.zeros(3))
    # reflection has determinant -1
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(DataError):
        Pose(rotation=refl, translation=np.zeros(3))


def test_pose_accepts_rotation_within_tolerance():
    theta = 0.3
    rot = np.array([[np.cos(theta), -np.sin(theta), 0],
                    [np.sin(theta), np.cos(theta), 0],
                    [0, 0, 1]])
    p = Pose(rotation=rot, translation=np.array([1.0, 2.0, 3.0]))
    assert p.rotation.dtype == np.float64


def test_point_cloud_coerces_and_validates():
    pc = PointCloud(np.zeros((5, 3)))
    assert pc.positions.dtype == np.float32
    assert len(pc) == 5
    with pytest.raises(DataError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    with pytest.raises(DataError):
        PointCloud(np.zeros((5, 2)))


def test_point_cloud_color_count_must_match():
    with pytest.raises(DataError):
        PointCloud(np.zeros((5, 3)), colors=np.zeros((4, 3)))


def test_split_spec_disjointness():
    s = SplitSpec(train_ids=(1, 2, 3), test_ids=(4,))
    assert s.train_ids == (1, 2, 3)
    with pytest.raises(ConfigError):
        SplitSpec(train_ids=(1, 2), test_ids=(2, 3))
