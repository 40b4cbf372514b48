"""Pinhole cameras, look-at poses on a sphere, and ray generation.

Camera frame convention: +x right, +y down, +z forward (the viewing direction).
``CameraPose.rotation`` is camera-to-world, so its columns are the camera axes in world space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._rng import make_rng
from .voxgrid import DEFAULT_BOUNDS, Bounds

WORLD_UP = np.array([0.0, 0.0, 1.0])
FALLBACK_UP = np.array([1.0, 0.0, 0.0])
DEFAULT_RADIUS = 4.0


@dataclass(frozen=True, eq=False)
class CameraPose:
    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        p = np.array(self.position, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(p))):
            raise ValueError("pose must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "position", p)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def to_json(self) -> dict:
        return {"rotation": [float(v) for v in self.rotation.reshape(-1)], "position": [float(v) for v in self.position]}

    @classmethod
    def from_json(cls, obj: dict) -> "CameraPose":
        return cls(np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3), np.asarray(obj["position"], dtype=np.float64))


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    focal: float
    cx: Optional[float] = None
    cy: Optional[float] = None

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image dimensions must be >= 1")
        if not (self.focal > 0 and math.isfinite(self.focal)):
            raise ValueError("focal length must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "focal", float(self.focal))
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "focal": self.focal, "cx": self.cx, "cy": self.cy}


def default_intrinsics(size: int, radius: float = DEFAULT_RADIUS, fill: float = 0.7) -> Intrinsics:
    """Square intrinsics where the bounding sphere of the unit cube spans ``fill`` of the image height."""
    half_angle = math.asin(min(math.sqrt(3.0) / radius, 1.0))
    focal = 0.5 * fill * size / math.tan(half_angle)
    return Intrinsics(size, size, focal)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    degenerate: bool = False


def look_at(position, target=(0.0, 0.0, 0.0), up=WORLD_UP) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(forward, FALLBACK_UP)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return CameraPose(np.stack([right, down, forward], axis=1), position)


def sample_spherical_poses(n: int, radius: float = DEFAULT_RADIUS, seed: int = 0) -> List[CameraPose]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not radius > 0:
        raise ValueError("radius must be positive")
    rng = make_rng(seed)
    u = rng.random((n, 2))
    z = 2.0 * u[:, 0] - 1.0
    phi = 2.0 * math.pi * u[:, 1]
    rxy = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    dirs = np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)
    return [look_at(radius * d) for d in dirs]


def spiral_poses(n: int, radius: float = DEFAULT_RADIUS, turns: float = 2.0, max_elevation: float = 60.0) -> List[CameraPose]:
    """Archimedean spiral on the sphere, sweeping elevation from -max to +max degrees."""
    if n < 1:
        raise ValueError("n must be >= 1")
    s = np.linspace(0.0, 1.0, n)
    elev = np.deg2rad(max_elevation) * (2.0 * s - 1.0)
    azim = 2.0 * math.pi * turns * s
    pts = np.stack([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)], axis=1)
    return [look_at(radius * p) for p in pts]


def orbit_pose(azimuth_deg: float, elevation_deg: float, radius: float = DEFAULT_RADIUS) -> CameraPose:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    return look_at(radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]))


def ray_box_interval(origins: np.ndarray, dirs: np.ndarray, bounds: Bounds = DEFAULT_BOUNDS):
    """Slab test. Returns ``(t_near, t_far, hit)``; t_near is clamped at 0."""
    lo = np.asarray(bounds[0])
    hi = np.asarray(bounds[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(np.max(tmin, axis=-1), 0.0)
    t_far = np.min(tmax, axis=-1)
    hit = t_far > t_near
    return np.where(hit, t_near, 0.0), np.where(hit, t_far, 0.0), hit


def camera_directions(intr: Intrinsics, px, py) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d = np.stack([(px + 0.5 - intr.cx) / intr.focal, (py + 0.5 - intr.cy) / intr.focal, np.ones_like(px)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(pose: CameraPose, intr: Intrinsics, px: int, py: int, bounds: Bounds = DEFAULT_BOUNDS) -> Ray:
    if not (0 <= px < intr.width and 0 <= py < intr.height):
        raise ValueError(f"pixel ({px}, {py}) outside {intr.width}x{intr.height} image")
    d = pose.rotation @ camera_directions(intr, px, py)
    d = d / np.linalg.norm(d)
    near, far, hit = ray_box_interval(pose.position[None], d[None], bounds)
    return Ray(pose.position.copy(), d, float(near[0]), float(far[0]), degenerate=not bool(hit[0]))


@dataclass
class RayBatch:
    """Flat arrays for many rays. Degenerate rays carry ``near == far == 0``."""

    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray
    colors: Optional[np.ndarray] = field(default=None)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, idx) -> "RayBatch":
        return RayBatch(
            self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.hit[idx],
            None if self.colors is None else self.colors[idx],
        )

    @staticmethod
    def concat(batches) -> "RayBatch":
        batches = list(batches)
        colors = None
        if all(b.colors is not None for b in batches):
            colors = np.concatenate([b.colors for b in batches])
        return RayBatch(
            np.concatenate([b.origins for b in batches]), np.concatenate([b.dirs for b in batches]),
            np.concatenate([b.near for b in batches]), np.concatenate([b.far for b in batches]),
            np.concatenate([b.hit for b in batches]), colors,
        )


def image_rays(pose: CameraPose, intr: Intrinsics, bounds: Bounds = DEFAULT_BOUNDS, image: Optional[np.ndarray] = None) -> RayBatch:
    """All pixel rays of one view in row-major (py, px) order."""
    py, px = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    dirs = camera_directions(intr, px.reshape(-1), py.reshape(-1)) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    near, far, hit = ray_box_interval(origins, dirs, bounds)
    colors = None
    if image is not None:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (intr.height, intr.width, 3):
            raise ValueError(f"image shape {image.shape} does not match intrinsics {intr.height}x{intr.width}x3")
        colors = image.reshape(-1, 3)
    return RayBatch(origins, dirs, near, far, hit, colors)
