"""Distributions over camera poses for the semantic consistency term."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene import Pose, SceneDataset


class PoseDistError(ValueError):
    pass


def look_at(origin, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``origin`` looking at ``target`` (camera -z toward the target)."""
    origin = np.asarray(origin, np.float64)
    up = np.asarray(up, np.float64)
    back = origin - np.asarray(target, np.float64)
    norm = np.linalg.norm(back)
    if norm == 0:
        raise PoseDistError("camera origin coincides with look-at target")
    back /= norm
    right = np.cross(up, back)
    if np.linalg.norm(right) < 1e-8:
        # viewing along up: any perpendicular helper axis will do
        helper = np.eye(3)[np.argmin(np.abs(back))]
        right = np.cross(helper, back)
    right /= np.linalg.norm(right)
    cam_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, cam_up, back, origin
    return Pose(m)


def _frame(up: np.ndarray) -> np.ndarray:
    """Orthonormal basis whose third column is ``up``."""
    up = up / np.linalg.norm(up)
    helper = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - helper.dot(up) * up
    e1 /= np.linalg.norm(e1)
    return np.stack([e1, np.cross(up, e1), up], axis=1)


@dataclass(frozen=True)
class Hemisphere:
    radius_min: float
    radius_max: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not 0 < self.radius_min <= self.radius_max:
            raise PoseDistError(f"need 0 < radius_min <= radius_max, got {self.radius_min}, {self.radius_max}")
        if np.linalg.norm(self.up) == 0:
            raise PoseDistError("up vector must be non-zero")

    @classmethod
    def around(cls, dataset: SceneDataset, look_at=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
               spread: float = 0.1) -> "Hemisphere":
        """Radii within +-``spread`` of the mean training-camera distance to ``look_at``."""
        dist = np.mean([np.linalg.norm(p.origin - np.asarray(look_at)) for p in dataset.poses])
        return cls((1 - spread) * dist, (1 + spread) * dist, tuple(look_at), tuple(up))


@dataclass(frozen=True, eq=False)
class Interpolation:
    poses: Sequence[Pose]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 3:
            raise PoseDistError(f"interpolation needs >= 3 source poses, got {len(self.poses)}")


PoseDistribution = Hemisphere | Interpolation


def sample_hemisphere_direction(up, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniform unit vectors on the hemisphere around ``up``.

    Uniform on the sphere means the height along ``up`` is itself uniform.
    """
    size = () if n is None else (n,)
    z = rng.random(size)
    phi = 2 * np.pi * rng.random(size)
    s = np.sqrt(1 - z * z)
    local = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
    return local @ _frame(np.asarray(up, np.float64)).T


def sample_hemisphere_pose(dist: Hemisphere, rng: np.random.Generator) -> Pose:
    if not isinstance(dist, Hemisphere):
        raise PoseDistError("sample_hemisphere_pose needs a Hemisphere distribution")
    u = sample_hemisphere_direction(dist.up, rng)
    r = rng.uniform(dist.radius_min, dist.radius_max)
    return look_at(np.asarray(dist.look_at) + r * u, dist.look_at, dist.up)


def blend(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * a + (1 - alpha) * b``."""
    return alpha * np.asarray(a) + (1 - alpha) * np.asarray(b)


def interpolate_origin(o1, o2, o3, alpha1: float, alpha2: float) -> np.ndarray:
    return blend(blend(o1, o2, alpha1), o3, alpha2)


def sample_interpolated_pose(dist: Interpolation, rng: np.random.Generator) -> Pose:
    """Nested blend of three distinct source origins, oriented toward ``look_at``."""
    if not isinstance(dist, Interpolation):
        raise PoseDistError("sample_interpolated_pose needs an Interpolation distribution")
    i, j, k = rng.choice(len(dist.poses), size=3, replace=False)
    a1, a2 = rng.random(2)
    origin = interpolate_origin(dist.poses[i].origin, dist.poses[j].origin, dist.poses[k].origin, a1, a2)
    return look_at(origin, dist.look_at, dist.up)


def sample_pose(dist, rng: np.random.Generator) -> Pose:
    if isinstance(dist, Hemisphere):
        return sample_hemisphere_pose(dist, rng)
    return sample_interpolated_pose(dist, rng)


def orbit_poses(n_frames: int, radius: float, elevation_deg: float, look_at_point=(0.0, 0.0, 0.0),
                up=(0.0, 0.0, 1.0)) -> list[Pose]:
    """Evenly spaced azimuths starting at 0, at a fixed elevation above the up-plane."""
    frame = _frame(np.asarray(up, np.float64))
    el = np.radians(elevation_deg)
    poses = []
    for k in range(n_frames):
        az = 2 * np.pi * k / n_frames
        local = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at(np.asarray(look_at_point) + radius * (frame @ local), look_at_point, up))
    return poses
