"""Target-free LiDAR / RGB / event extrinsic calibration core."""

from trical.geometry import (
    PointCloud,
    Quaternion,
    RigidTransform,
    angular_distance,
    apply,
    compose,
    euler_to_quat,
    inverse,
    quat_normalize,
    quat_to_euler,
)

__version__ = "0.1.0"
