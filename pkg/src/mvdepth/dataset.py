"""Synthetic primitive shapes, an analytic depth renderer and dataset files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, CameraRig
from .geometry import FAR, NEAR, denormalize_depth, normalize_depth, pixel_grid
from .io import read_depth_container, write_depth_container

KINDS = ("sphere", "box", "cylinder", "union")

SPHERE_RADII = (0.3, 0.8)
BOX_HALF = (0.25, 0.7)
CYL_RADII = (0.2, 0.5)
CYL_HEIGHT = (0.4, 1.2)
UNION_OFFSET = 0.3

__all__ = [
    "Part", "PrimitiveShape", "sample_shape", "render_depth", "render_views",
    "normalize_depth", "denormalize_depth", "build_dataset", "load_dataset",
    "surface_points",
]


@dataclass(frozen=True)
class Part:
    """A single convex primitive. ``size`` is radius (sphere), half extents
    (box) or ``(radius, half_height)`` (z-aligned cylinder)."""

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]

    def bounding_radius(self) -> float:
        c = float(np.linalg.norm(self.center))
        if self.kind == "sphere":
            return c + self.size[0]
        if self.kind == "box":
            return c + float(np.linalg.norm(self.size))
        return c + math.hypot(self.size[0], self.size[1])

    def scaled(self, s: float) -> "Part":
        return Part(self.kind, tuple(float(x) * s for x in self.center),
                    tuple(float(x) * s for x in self.size))


@dataclass(frozen=True)
class PrimitiveShape:
    kind: str
    parts: tuple[Part, ...]
    seed: int | None = None

    def bounding_radius(self) -> float:
        return max((p.bounding_radius() for p in self.parts), default=0.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed,
                "parts": [{"kind": p.kind, "center": list(p.center), "size": list(p.size)}
                          for p in self.parts]}


def _random_part(rng: np.random.Generator, kind: str, center) -> Part:
    center = tuple(float(x) for x in center)
    if kind == "sphere":
        return Part(kind, center, (float(rng.uniform(*SPHERE_RADII)),))
    if kind == "box":
        return Part(kind, center, tuple(float(x) for x in rng.uniform(*BOX_HALF, size=3)))
    r = float(rng.uniform(*CYL_RADII))
    h = float(rng.uniform(*CYL_HEIGHT))
    return Part("cylinder", center, (r, h / 2.0))


def _fit_unit_ball(parts: list[Part]) -> tuple[Part, ...]:
    radius = max(p.bounding_radius() for p in parts)
    if radius > 1.0:
        parts = [p.scaled(1.0 / radius) for p in parts]
    return tuple(parts)


def sample_shape(seed: int, kinds=KINDS) -> PrimitiveShape:
    """Deterministic random primitive (or union of two) inside the unit ball.

    Kinds are drawn uniformly from ``kinds``. Single primitives are centred at
    the origin; union parts are offset by at most 0.3.
    """
    rng = np.random.default_rng(seed)
    kind = str(kinds[int(rng.integers(len(kinds)))])
    if kind == "union":
        parts = []
        for _ in range(2):
            sub = str(("sphere", "box", "cylinder")[int(rng.integers(3))])
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            offset = direction * rng.uniform(0.0, UNION_OFFSET)
            parts.append(_random_part(rng, sub, offset))
    elif kind in ("sphere", "box", "cylinder"):
        parts = [_random_part(rng, kind, (0.0, 0.0, 0.0))]
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return PrimitiveShape(kind, _fit_unit_ball(parts), seed)


def _part_surface(rng: np.random.Generator, part: Part, n: int) -> np.ndarray:
    c = np.asarray(part.center)
    if part.kind == "sphere":
        d = rng.normal(size=(n, 3))
        return c + part.size[0] * d / np.linalg.norm(d, axis=1, keepdims=True)
    if part.kind == "box":
        h = np.asarray(part.size)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]]).repeat(2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1, 1, size=(n, 3))
        axis = face // 2
        pts[np.arange(n), axis] = np.where(face % 2, 1.0, -1.0)
        return c + pts * h
    r, hh = part.size
    side, cap = 2 * np.pi * r * 2 * hh, np.pi * r * r
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    phi = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.select([which == 0, which == 1], [rng.uniform(-hh, hh, n), -hh], hh)
    return c + np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)


def _part_area(part: Part) -> float:
    if part.kind == "sphere":
        return 4 * np.pi * part.size[0] ** 2
    if part.kind == "box":
        a, b, c = part.size
        return 8 * (a * b + b * c + a * c)
    r, hh = part.size
    return 2 * np.pi * r * (2 * hh + r)


def _inside(part: Part, pts: np.ndarray) -> np.ndarray:
    q = pts - np.asarray(part.center)
    tol = 1e-9
    if part.kind == "sphere":
        return np.linalg.norm(q, axis=1) < part.size[0] - tol
    if part.kind == "box":
        return np.all(np.abs(q) < np.asarray(part.size) - tol, axis=1)
    r, hh = part.size
    return (np.hypot(q[:, 0], q[:, 1]) < r - tol) & (np.abs(q[:, 2]) < hh - tol)


def surface_points(shape: PrimitiveShape, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points sampled uniformly by area on the outer surface of ``shape``.

    For unions, points of one part that fall inside the other are rejected.
    """
    rng = np.random.default_rng(seed)
    out = np.empty((0, 3))
    while len(out) < n:
        areas = np.array([_part_area(p) for p in shape.parts])
        counts = rng.multinomial(n, areas / areas.sum())
        pts = np.concatenate([_part_surface(rng, p, m) for p, m in zip(shape.parts, counts)])
        hidden = np.zeros(len(pts), bool)
        for p in shape.parts:
            hidden |= _inside(p, pts)
        pts = pts[~hidden]
        out = np.concatenate([out, pts[rng.permutation(len(pts))]])
    return out[:n]


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------

def _hit_sphere(o, d, center, radius):
    oc = o - np.asarray(center)
    a = np.sum(d * d, axis=-1)
    b = 2.0 * np.sum(d * oc, axis=-1)
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    return np.where(hit & (t > 0), t, np.inf)


def _hit_box(o, d, center, half):
    lo = np.asarray(center) - np.asarray(half)
    hi = np.asarray(center) + np.asarray(half)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 0), t, np.inf)


def _hit_cylinder(o, d, center, radius, half_height):
    oc = o - np.asarray(center)
    dx, dy, dz = d[..., 0], d[..., 1], d[..., 2]
    ox, oy, oz = oc
    best = np.full(d.shape[:-1], np.inf)
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    a_safe = np.where(ok, a, 1.0)
    for t in ((-b - sq) / (2 * a_safe), (-b + sq) / (2 * a_safe)):
        z = oz + t * dz
        good = ok & (t > 0) & (np.abs(z) <= half_height)
        best = np.where(good & (t < best), t, best)
    with np.errstate(divide="ignore", invalid="ignore"):
        for zc in (-half_height, half_height):
            t = (zc - oz) / dz
            x = ox + t * dx
            y = oy + t * dy
            good = np.isfinite(t) & (t > 0) & (x * x + y * y <= radius * radius)
            best = np.where(good & (t < best), t, best)
    return best


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray origin and per-pixel directions scaled to unit camera-z."""
    K = camera.intrinsics
    grid = pixel_grid(K.height, K.width)
    dirs_cam = np.stack([(grid[..., 0] - K.cx) / K.fx, (grid[..., 1] - K.cy) / K.fy,
                         np.ones(grid.shape[:2])], axis=-1)
    dirs = dirs_cam @ camera.pose.rotation
    return camera.pose.center, dirs


def render_depth(shape: PrimitiveShape, camera: Camera, background: float = FAR) -> np.ndarray:
    """Camera-z depth of the nearest surface hit per pixel; misses get ``background``."""
    o, d = camera_rays(camera)
    depth = np.full(d.shape[:-1], np.inf)
    for p in shape.parts:
        if p.kind == "sphere":
            if p.size[0] <= 0:
                continue
            t = _hit_sphere(o, d, p.center, p.size[0])
        elif p.kind == "box":
            if min(p.size) <= 0:
                continue
            t = _hit_box(o, d, p.center, p.size)
        else:
            if min(p.size) <= 0:
                continue
            t = _hit_cylinder(o, d, p.center, *p.size)
        depth = np.minimum(depth, t)
    return np.where(np.isfinite(depth), depth, background)


def render_views(shape: PrimitiveShape, rig: CameraRig, near: float = NEAR,
                 far: float = FAR) -> np.ndarray:
    """Normalised (N, H, W) depth set; background exactly +1."""
    maps = []
    for cam in rig.cameras:
        raw = render_depth(shape, cam, background=np.inf)
        norm = normalize_depth(raw, near, far)
        fg = np.isfinite(raw)
        # foreground stays strictly below the background threshold
        norm = np.where(fg, np.minimum(norm, 1.0 - 1e-4 - 1e-6), 1.0)
        maps.append(norm)
    return np.stack(maps)


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    manifest: dict
    samples: np.ndarray  # (count, N, H, W) normalised float32
    rig: CameraRig = field(repr=False)

    def __len__(self) -> int:
        return len(self.samples)


def sample_seeds(seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)]


def build_dataset(count: int, rig: CameraRig, seed: int, out_path=None, kinds=KINDS,
                  near: float = NEAR, far: float = FAR) -> Dataset:
    if count < 1:
        raise ValueError("count must be at least 1")
    seeds = sample_seeds(seed, count)
    shapes = [sample_shape(s, kinds) for s in seeds]
    samples = np.stack([render_views(s, rig, near, far) for s in shapes]).astype(np.float32)
    H, W = rig.resolution
    manifest = {
        "kind": "dataset",
        "count": count, "N": len(rig), "H": H, "W": W,
        "near": near, "far": far,
        "rig": rig.to_dict(),
        "seed": seed,
        "seeds": seeds,
        "kinds": list(kinds),
        "shapes": [s.kind for s in shapes],
    }
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        write_depth_container(out_path, manifest, samples)
    return Dataset(manifest, samples, rig)


def load_dataset(path) -> Dataset:
    manifest, samples = read_depth_container(path)
    return Dataset(manifest, samples, CameraRig.from_dict(manifest["rig"]))
