"""Pinhole cameras and the two eight-view rig layouts.

Conventions: right-handed world frame with +z up. Azimuth is measured in the
xy-plane from +x, elevation toward +z. Camera frames follow the usual vision
convention (x right, y down, z forward), poses are world-to-camera and pixel
centres sit at integer coordinates ``(u, v) = (column, row)``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPHERE_RADIUS = math.sqrt(3.0)

FIXED_RIG_LABELS = "ABCDEFGH"
# (elevation, azimuth) in degrees per vertex label.
FIXED_RIG_ANGLES = {
    "A": (30.0, 45.0),
    "F": (30.0, 135.0),
    "H": (30.0, 225.0),
    "D": (30.0, 315.0),
    "G": (-10.0, 45.0),
    "C": (-10.0, 135.0),
    "B": (-10.0, 225.0),
    "E": (-10.0, 315.0),
}

_UP = np.array([0.0, 0.0, 1.0])
_UP_FALLBACK = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, height: int, width: int | None = None) -> "Intrinsics":
        """fx = fy = H with the principal point at the image centre."""
        width = height if width is None else width
        return cls(float(height), float(height), (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, height: int, width: int | None = None) -> "Intrinsics":
        """Intrinsics for the same camera resampled to ``height x width`` pixels."""
        width = height if width is None else width
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            width, height,
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform ``x_cam = R x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Viewing direction in world coordinates."""
        return self.rotation[2].copy()

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera coordinates."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Camera points (..., 3) to world coordinates."""
        return (np.asarray(points) - self.translation) @ self.rotation

    def relative_to(self, other: "Pose") -> tuple[np.ndarray, np.ndarray]:
        """(R, t) mapping this camera's coordinates into ``other``'s."""
        R = other.rotation @ self.rotation.T
        t = other.translation - R @ self.translation
        return R, t


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    sphere_radius: float = SPHERE_RADIUS
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(len(self.cameras))))

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, i: int) -> Camera:
        return self.cameras[i]

    @property
    def centers(self) -> np.ndarray:
        return np.stack([c.pose.center for c in self.cameras])

    @property
    def resolution(self) -> tuple[int, int]:
        K = self.cameras[0].intrinsics
        return K.height, K.width

    def subset(self, views: Sequence[int]) -> "CameraRig":
        return CameraRig(tuple(self.cameras[v] for v in views), self.sphere_radius,
                         tuple(self.labels[v] for v in views))

    def with_intrinsics(self, intrinsics: Intrinsics) -> "CameraRig":
        return CameraRig(tuple(Camera(intrinsics, c.pose) for c in self.cameras),
                         self.sphere_radius, self.labels)

    def neighbor_table(self, R: int) -> np.ndarray:
        """Indices of the ``R`` nearest cameras (by centre distance) for every view.

        Ties are broken by view index.
        """
        n = len(self)
        if R > n - 1:
            raise ValueError(f"R={R} exceeds the {n - 1} available neighbours")
        C = self.centers
        dist = np.linalg.norm(C[:, None] - C[None], axis=-1)
        table = np.empty((n, R), dtype=np.int64)
        for v in range(n):
            order = sorted((j for j in range(n) if j != v), key=lambda j: (dist[v, j], j))
            table[v] = order[:R]
        return table

    def to_dict(self) -> dict:
        return {
            "sphere_radius": self.sphere_radius,
            "cameras": [
                {
                    "intrinsics": c.intrinsics.to_dict(),
                    "rotation": [float(x) for x in c.pose.rotation.reshape(-1)],
                    "translation": [float(x) for x in c.pose.translation],
                }
                for c in self.cameras
            ],
            "labels": list(self.labels),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraRig":
        cams = []
        for c in data["cameras"]:
            K = c["intrinsics"]
            cams.append(Camera(
                Intrinsics(float(K["fx"]), float(K["fy"]), float(K["cx"]), float(K["cy"]),
                           int(K["width"]), int(K["height"])),
                Pose(np.array(c["rotation"], dtype=float).reshape(3, 3),
                     np.array(c["translation"], dtype=float)),
            ))
        return cls(tuple(cams), float(data["sphere_radius"]), tuple(data.get("labels", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "CameraRig":
        return cls.from_dict(json.loads(text))


def rodrigues_rotation(axis, angle: float) -> np.ndarray:
    """Euler-Rodrigues rotation matrix.

    Uses ``a = cos(angle/2)`` and ``(b, c, d) = -axis/|axis| * sin(angle/2)``,
    which turns vectors clockwise about ``axis`` under the right-hand rule.
    """
    n = np.asarray(axis, dtype=float).reshape(3)
    norm = np.linalg.norm(n)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("rotation axis must be a non-zero finite vector")
    a = math.cos(angle / 2.0)
    b, c, d = -n / norm * math.sin(angle / 2.0)
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])


def look_at_pose(center, target=(0.0, 0.0, 0.0), up_hint=_UP) -> tuple[Pose, bool]:
    """World-to-camera pose for a camera at ``center`` looking at ``target``.

    Returns the pose and whether the fallback up axis (+y) had to replace a
    hint parallel to the viewing direction.
    """
    center = np.asarray(center, dtype=float)
    target = np.asarray(target, dtype=float)
    forward = target - center
    dist = np.linalg.norm(forward)
    if dist == 0.0:
        raise ValueError("camera centre coincides with the target")
    forward = forward / dist

    fallback = False
    right = np.cross(forward, np.asarray(up_hint, dtype=float))
    if np.linalg.norm(right) < 1e-9:
        fallback = True
        right = np.cross(forward, _UP_FALLBACK)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose(R, -R @ center), fallback


def spherical_to_cartesian(radius: float, elevation_deg: float, azimuth_deg: float) -> np.ndarray:
    el = math.radians(elevation_deg)
    az = math.radians(azimuth_deg)
    return radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def _rig_from_centers(centers, intrinsics: Intrinsics, radius: float, labels) -> CameraRig:
    cams = tuple(Camera(intrinsics, look_at_pose(c)[0]) for c in centers)
    return CameraRig(cams, radius, tuple(labels))


def fixed_cuboid_rig(intrinsics: Intrinsics, views: int = 8) -> CameraRig:
    """Eight cameras at elevations 30/-10 degrees, ordered A..H.

    ``views < 8`` keeps the first cameras in that order, for toy runs.
    """
    if not 1 <= views <= 8:
        raise ValueError("views must be between 1 and 8")
    labels = FIXED_RIG_LABELS[:views]
    centers = [spherical_to_cartesian(SPHERE_RADIUS, *FIXED_RIG_ANGLES[l]) for l in labels]
    return _rig_from_centers(centers, intrinsics, SPHERE_RADIUS, labels)


def cube_vertices(first_center) -> np.ndarray:
    """The eight cube vertices A..H generated from a freely placed vertex A.

    The plane ABCD is ``x/X = z/Z`` for ``A = (X, Y, Z)``; B, C and D follow
    from rotating A inside that plane, E..H from offsetting the midpoints of
    AB and CD along the plane normal.
    """
    A = np.asarray(first_center, dtype=float).reshape(3)
    norm = np.linalg.norm(A)
    if abs(norm - SPHERE_RADIUS) > 1e-6:
        warnings.warn(f"first camera at radius {norm:.6g}, rescaling onto the sqrt(3) sphere",
                      RuntimeWarning, stacklevel=2)
        if norm == 0:
            raise ValueError("first camera centre cannot be the origin")
        A = A * (SPHERE_RADIUS / norm)
    X, _, Z = A
    if math.hypot(X, Z) < 1e-9:
        raise ValueError("first camera on the y axis: plane x/X = z/Z is undefined")
    n = np.array([Z, 0.0, -X])

    big = 2.0 * math.atan(math.sqrt(2.0))
    small = 2.0 * math.atan(1.0 / math.sqrt(2.0))
    B = rodrigues_rotation(n, big) @ A
    C = rodrigues_rotation(n, big + small) @ A
    D = rodrigues_rotation(n, 2 * big + small) @ A

    AB, AD = B - A, D - A
    normal = np.cross(AB, AD)
    normal /= np.linalg.norm(normal)
    half = np.linalg.norm(AB) / 2.0
    E = (A + B) / 2 + normal * half
    F = (A + B) / 2 - normal * half
    G = (C + D) / 2 + normal * half
    H = (C + D) / 2 - normal * half
    return np.stack([A, B, C, D, E, F, G, H])


def dynamic_cube_rig(first_center, intrinsics: Intrinsics, views: int = 8) -> CameraRig:
    """Cube rig inscribed in the sqrt(3) sphere, anchored at ``first_center``."""
    if not 1 <= views <= 8:
        raise ValueError("views must be between 1 and 8")
    verts = cube_vertices(first_center)[:views]
    return _rig_from_centers(verts, intrinsics, SPHERE_RADIUS, FIXED_RIG_LABELS[:views])


def flatten_extrinsics(rig: CameraRig) -> np.ndarray:
    """(N, 16) row-major 4x4 world-to-camera matrices."""
    return np.stack([c.pose.matrix.reshape(16) for c in rig.cameras])
