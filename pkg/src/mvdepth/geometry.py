"""Projection, reprojection and depth fusion over multi-view depth maps.

Array functions here work in world units. Pixels are ``(u, v)`` with ``u``
the column; depth maps are indexed ``[row, col]``. Depth means the camera-z
coordinate, so a pixel's viewing ray is ``depth * K^-1 [u, v, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import SPHERE_RADIUS, Camera, CameraRig

MIN_DEPTH = 1e-3
NEAR = SPHERE_RADIUS - 1.0
FAR = SPHERE_RADIUS + 1.0
# Normalised values at or above this are background (the far clip, +1).
BACKGROUND_THRESHOLD = 1.0 - 1e-4

PSI_MAX = 1.0
EPS_REL = 0.01
MIN_VIEWS = 2
TAU = 0.15


def normalize_depth(depth, near: float = NEAR, far: float = FAR) -> np.ndarray:
    """Affine map ``near -> -1``, ``far -> +1``, clipped to [-1, 1].

    Non-finite entries (rays that missed) map to +1.
    """
    if not near < far:
        raise ValueError("near must be smaller than far")
    depth = np.asarray(depth, dtype=np.float64)
    out = 2.0 * (depth - near) / (far - near) - 1.0
    out = np.where(np.isfinite(out), out, 1.0)
    return np.clip(out, -1.0, 1.0)


def denormalize_depth(values, near: float = NEAR, far: float = FAR):
    return near + (values + 1.0) * 0.5 * (far - near)


@dataclass
class DepthMapSet:
    """Normalised multi-view depth maps bound to the rig that produced them."""

    values: np.ndarray
    rig: CameraRig
    near: float = NEAR
    far: float = FAR

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[0] != len(self.rig):
            raise ValueError(f"expected ({len(self.rig)}, H, W) depth maps, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("depth maps must be finite")

    @property
    def foreground(self) -> np.ndarray:
        return self.values < BACKGROUND_THRESHOLD

    def world(self) -> np.ndarray:
        return denormalize_depth(self.values.astype(np.float64), self.near, self.far)

    def with_world(self, world: np.ndarray) -> "DepthMapSet":
        vals = 2.0 * (world - self.near) / (self.far - self.near) - 1.0
        vals = np.where(self.foreground, vals, self.values)
        return DepthMapSet(vals.astype(self.values.dtype), self.rig, self.near, self.far)


# ---------------------------------------------------------------------------
# Pinhole primitives
# ---------------------------------------------------------------------------

def back_project(pixel, depth, intrinsics) -> np.ndarray:
    """Lift pixel(s) ``(..., 2)`` with depth(s) to camera coordinates ``(..., 3)``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    K = intrinsics
    x = (pixel[..., 0] - K.cx) / K.fx * depth
    y = (pixel[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def project(points, intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Perspective projection of camera-frame points; returns (pixels, z)."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= 0):
        raise ValueError("point behind the camera")
    K = intrinsics
    u = K.fx * points[..., 0] / z + K.cx
    v = K.fy * points[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def sample_ray_segment(pixel, depth: float, k: int, half_width: float, intrinsics) -> np.ndarray:
    """``k`` points on the pixel's ray, depths evenly spread over ``depth +- half_width``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if half_width < 0:
        raise ValueError("half_width must be non-negative")
    depths = segment_depths(depth, k, half_width)
    return back_project(np.broadcast_to(np.asarray(pixel, float), (k, 2)), depths, intrinsics)


def segment_depths(depth, k: int, half_width: float) -> np.ndarray:
    offsets = np.linspace(-half_width, half_width, k) if k > 1 else np.zeros(1)
    return np.maximum(np.asarray(depth, dtype=np.float64)[..., None] + offsets, MIN_DEPTH)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of ``(u, v)`` pixel centres."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                       indexing="ij")
    return np.stack([u, v], axis=-1)


def bilinear(image: np.ndarray, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup of ``image[row, col]`` at continuous ``(u, v)`` pixels.

    Returns ``(values, inside)``; outside samples get value 0.
    """
    H, W = image.shape
    u = pixels[..., 0]
    v = pixels[..., 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    du = uc - u0
    dv = vc - v0
    val = (image[v0, u0] * (1 - du) * (1 - dv) + image[v0, u1] * du * (1 - dv)
           + image[v1, u0] * (1 - du) * dv + image[v1, u1] * du * dv)
    return np.where(inside, val, 0.0), inside


def _taps_all(mask: np.ndarray, pixels: np.ndarray, inside: np.ndarray) -> np.ndarray:
    """True where every bilinear tap with non-zero weight is set in ``mask``."""
    H, W = mask.shape
    u = np.where(inside, pixels[..., 0], 0.0)
    v = np.where(inside, pixels[..., 1], 0.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.where(u > u0, np.minimum(u0 + 1, W - 1), u0)
    v1 = np.where(v > v0, np.minimum(v0 + 1, H - 1), v0)
    ok = mask[v0, u0] & mask[v0, u1] & mask[v1, u0] & mask[v1, u1]
    return ok & inside


def transfer(points: np.ndarray, src: Camera, dst: Camera) -> np.ndarray:
    """Camera-frame points of ``src`` expressed in ``dst``'s frame."""
    R, t = src.pose.relative_to(dst.pose)
    return points @ R.T + t


def _safe_project(points: np.ndarray, intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z = points[..., 2]
    front = z > MIN_DEPTH
    zs = np.where(front, z, 1.0)
    u = intrinsics.fx * points[..., 0] / zs + intrinsics.cx
    v = intrinsics.fy * points[..., 1] / zs + intrinsics.cy
    pix = np.stack([np.where(front, u, np.nan), np.where(front, v, np.nan)], axis=-1)
    return pix, z, front


# ---------------------------------------------------------------------------
# Visibility tests
# ---------------------------------------------------------------------------

def cross_view_visibility(pixel, depth: float, src: Camera, dst: Camera,
                          dst_depth: np.ndarray, tau: float = TAU) -> bool:
    """Attention-mask rule: the point's depth in ``dst`` agrees with ``dst_depth`` within ``tau``."""
    rho = back_project(pixel, depth, src.intrinsics)
    pr = transfer(rho, src, dst)
    pix, z, front = _safe_project(pr, dst.intrinsics)
    if not front:
        return False
    val, inside = bilinear(dst_depth, pix)
    return bool(inside and abs(z - val) < tau)


@dataclass
class Reprojection:
    """Forward-project/reproject round trip of source pixels through one neighbour."""

    forward_pixel: np.ndarray   # r_mn in the neighbour
    pixel_error: np.ndarray     # |v_ij - v~ij~|
    reprojected_depth: np.ndarray  # z of the reprojected point in the source frame
    relative_error: np.ndarray
    valid: np.ndarray           # round trip defined (in bounds, in front, on foreground)

    def passes(self, psi_max: float = PSI_MAX, eps: float = EPS_REL) -> np.ndarray:
        return self.valid & (self.pixel_error < psi_max) & (self.relative_error < eps)


def reproject(pixels: np.ndarray, src_depth: np.ndarray, src: Camera, dst: Camera,
              dst_depth: np.ndarray, dst_foreground: np.ndarray | None = None) -> Reprojection:
    """Round-trip source pixels (with depths ``src_depth``) through view ``dst``.

    ``dst_depth`` is the neighbour's world-depth map; when ``dst_foreground`` is
    given, lookups touching a background tap are invalid.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(src_depth, dtype=np.float64)
    pos = d > 0
    rho = back_project(pixels, np.where(pos, d, 1.0), src.intrinsics)
    rho_r = transfer(rho, src, dst)
    fwd, _, front1 = _safe_project(rho_r, dst.intrinsics)
    d_r, inside = bilinear(dst_depth, fwd)
    valid = pos & front1 & inside & (d_r > 0)
    if dst_foreground is not None:
        valid &= _taps_all(dst_foreground, fwd, inside)
    back = back_project(np.where(valid[..., None], fwd, 0.0), np.where(valid, d_r, 1.0),
                        dst.intrinsics)
    back_v = transfer(back, dst, src)
    pix2, z2, front2 = _safe_project(back_v, src.intrinsics)
    valid &= front2
    pix_err = np.linalg.norm(pixels - pix2, axis=-1)
    rel = np.abs(d - z2) / np.where(pos, d, 1.0)
    return Reprojection(
        forward_pixel=fwd,
        pixel_error=np.where(valid, pix_err, np.inf),
        reprojected_depth=np.where(valid, z2, np.nan),
        relative_error=np.where(valid, rel, np.inf),
        valid=valid,
    )


def fusion_visibility(pixel, src_depth: np.ndarray, dst_depth: np.ndarray, src: Camera,
                      dst: Camera, psi_max: float = PSI_MAX, eps: float = EPS_REL) -> bool:
    """Whether source pixel ``(u, v)`` survives the pixel and relative-depth round-trip tests."""
    u, v = pixel
    if src_depth[int(v), int(u)] <= 0:
        raise ValueError("source depth must be positive")
    rep = reproject(np.array([u, v], float), src_depth[int(v), int(u)], src, dst, dst_depth)
    return bool(rep.passes(psi_max, eps))


# ---------------------------------------------------------------------------
# Fusion over whole depth sets
# ---------------------------------------------------------------------------

def _pairwise(world: np.ndarray, fg: np.ndarray, rig: CameraRig):
    """Yield (v, r, Reprojection) over ordered view pairs, views ascending."""
    N, H, W = world.shape
    grid = pixel_grid(H, W)
    for v in range(N):
        src_d = np.where(fg[v], world[v], 1.0)
        for r in range(N):
            if r == v:
                continue
            rep = reproject(grid, src_d, rig[v], rig[r], world[r], fg[r])
            rep.valid &= fg[v]
            yield v, r, rep


def average_world_depths(world: np.ndarray, fg: np.ndarray, rig: CameraRig,
                         psi_max: float = PSI_MAX, eps: float = EPS_REL) -> np.ndarray:
    """Mean of own depth and every visible neighbour's reprojected depth.

    All reprojections read the input snapshot; contributions are summed in
    ascending view order.
    """
    total = np.where(fg, world, 0.0).astype(np.float64)
    count = fg.astype(np.float64)
    for v, _, rep in _pairwise(world, fg, rig):
        ok = rep.passes(psi_max, eps)
        total[v] += np.where(ok, rep.reprojected_depth, 0.0)
        count[v] += ok
    out = world.astype(np.float64).copy()
    out[fg] = total[fg] / count[fg]
    return out


def support_counts(world: np.ndarray, fg: np.ndarray, rig: CameraRig,
                   psi_max: float = PSI_MAX, eps: float = EPS_REL) -> np.ndarray:
    counts = np.zeros(world.shape, dtype=np.int64)
    for v, _, rep in _pairwise(world, fg, rig):
        counts[v] += rep.passes(psi_max, eps)
    return counts


def depth_average(depths: DepthMapSet, psi_max: float = PSI_MAX, eps: float = EPS_REL) -> DepthMapSet:
    fg = depths.foreground
    world = depths.world()
    fused = average_world_depths(world, fg, depths.rig, psi_max, eps)
    return depths.with_world(fused)


def depth_filter(depths: DepthMapSet, psi_max: float = PSI_MAX, eps: float = EPS_REL,
                 min_views: int = MIN_VIEWS) -> np.ndarray:
    """Mask of pixels consistent with at least ``min_views`` neighbouring views."""
    if min_views <= 0:
        return np.ones(depths.values.shape, dtype=bool)
    counts = support_counts(depths.world(), depths.foreground, depths.rig, psi_max, eps)
    return counts >= min_views


def fuse_to_pointcloud(depths: DepthMapSet, mask: np.ndarray | None = None) -> np.ndarray:
    """World-space points of every unmasked foreground pixel, views in order."""
    keep = depths.foreground
    if mask is not None:
        if mask.shape != keep.shape:
            raise ValueError("mask shape does not match the depth maps")
        keep = keep & mask
    world = depths.world()
    H, W = world.shape[1:]
    grid = pixel_grid(H, W)
    clouds = []
    for v, cam in enumerate(depths.rig.cameras):
        sel = keep[v]
        if not sel.any():
            continue
        pts = back_project(grid[sel], world[v][sel], cam.intrinsics)
        clouds.append(cam.pose.apply_inverse(pts))
    if not clouds:
        return np.zeros((0, 3))
    return np.concatenate(clouds, axis=0)


def reprojection_error(depths: DepthMapSet, psi_max: float = PSI_MAX) -> float:
    """Mean relative depth discrepancy over pixel pairs whose round trip lands within ``psi_max``.

    Used to compare cross-view consistency of sampled depth sets.
    """
    errs = []
    for _, _, rep in _pairwise(depths.world(), depths.foreground, depths.rig):
        sel = rep.valid & (rep.pixel_error < psi_max)
        errs.append(rep.relative_error[sel])
    errs = np.concatenate(errs) if errs else np.zeros(0)
    return float(errs.mean()) if errs.size else math.nan


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def write_ply(path, points: np.ndarray) -> None:
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 3))
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.tobytes())


def read_ply(path) -> np.ndarray:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "binary_little_endian" not in header[1]:
        raise ValueError("only binary little-endian PLY is supported")
    count = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    return np.frombuffer(data[end:end + 12 * count], dtype="<f4").reshape(count, 3).copy()
