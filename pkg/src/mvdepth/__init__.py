"""Multi-view depth diffusion with epipolar attention and depth fusion."""

from .camera import (Camera, CameraRig, Intrinsics, Pose, dynamic_cube_rig, fixed_cuboid_rig,
                     look_at_pose, rodrigues_rotation)
from .geometry import DepthMapSet, depth_average, depth_filter, fuse_to_pointcloud
from .scheduler import SamplerConfig, cosine_schedule, sample_completion, sample_unconditional

__version__ = "0.1.0"

__all__ = [
    "Camera", "CameraRig", "Intrinsics", "Pose", "dynamic_cube_rig", "fixed_cuboid_rig",
    "look_at_pose", "rodrigues_rotation", "DepthMapSet", "depth_average", "depth_filter",
    "fuse_to_pointcloud", "SamplerConfig", "cosine_schedule", "sample_completion",
    "sample_unconditional",
]
