"""Procedural scenes rendered by exact ray casting against closed-form geometry.

Ground truth is available for any pose, which makes these scenes usable as
held-out references and as desk-scale training data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image

from .posedist import look_at, sample_hemisphere_direction
from .scene import CameraIntrinsics, Pose, camera_rays

LIGHT_DIR = np.array([0.4, 0.3, 1.0]) / np.linalg.norm([0.4, 0.3, 1.0])
AMBIENT = 0.35

FACE_COLORS = np.array([
    [0.85, 0.20, 0.15],  # +x
    [0.15, 0.65, 0.25],  # -x
    [0.20, 0.35, 0.85],  # +y
    [0.90, 0.75, 0.15],  # -y
    [0.75, 0.30, 0.80],  # +z
    [0.15, 0.75, 0.80],  # -z
])


@dataclass(frozen=True)
class FixtureSpec:
    kind: Literal["textured-cube", "two-sphere"] = "textured-cube"
    image_size: int = 64
    num_views: int = 8
    num_test_views: int = 0
    radius: float = 4.0
    min_elevation_deg: float = 10.0
    camera_angle_x: float = 0.6911112070083618
    seed: int = 0

    def __post_init__(self):
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")
        if self.num_test_views < 0:
            raise ValueError("num_test_views must be >= 0")
        if self.kind not in ("textured-cube", "two-sphere"):
            raise ValueError(f"unknown fixture kind {self.kind!r}")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.image_size, self.image_size, self.camera_angle_x)


def _shade(albedo: np.ndarray, normal: np.ndarray) -> np.ndarray:
    lambert = np.clip(normal @ LIGHT_DIR, 0.0, None)[:, None]
    return albedo * (AMBIENT + (1 - AMBIENT) * lambert)


def _trace_cube(o: np.ndarray, d: np.ndarray, half: float = 0.7, checks: int = 4):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1, t2 = (-half - o) * inv, (half - o) * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (t_near <= t_far) & (t_far > 0)
    rgb = np.zeros((len(o), 3))
    if not hit.any():
        return hit, rgb
    p = o[hit] + t_near[hit, None] * d[hit]
    axis = np.argmax(np.abs(p) / half, axis=1)
    sign = np.sign(p[np.arange(len(p)), axis])
    face = 2 * axis + (sign < 0)
    normal = np.zeros_like(p)
    normal[np.arange(len(p)), axis] = sign
    # checker on the two in-plane coordinates
    uv = np.take_along_axis(p, np.array([[1, 2], [0, 2], [0, 1]])[axis], axis=1)
    cell = np.floor((uv + half) / (2 * half) * checks).astype(int)
    parity = (cell.sum(axis=1) % 2)[:, None]
    albedo = FACE_COLORS[face] * np.where(parity == 1, 1.0, 0.55)
    rgb[hit] = _shade(albedo, normal)
    return hit, rgb


SPHERES = (
    (np.array([0.0, -0.55, 0.0]), 0.5, np.array([0.85, 0.25, 0.2])),
    (np.array([0.0, 0.55, 0.0]), 0.5, np.array([0.2, 0.4, 0.85])),
)


def _trace_spheres(o: np.ndarray, d: np.ndarray):
    best = np.full(len(o), np.inf)
    rgb = np.zeros((len(o), 3))
    for center, r, color in SPHERES:
        oc = o - center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - r * r
        disc = b * b - c
        ok = disc >= 0
        t = np.where(ok, -b - np.sqrt(np.where(ok, disc, 0.0)), np.inf)
        t = np.where(t > 0, t, np.inf)
        closer = t < best
        if closer.any():
            p = o[closer] + t[closer, None] * d[closer]
            n = (p - center) / r
            stripes = np.where(np.floor((n[:, 2] + 1) * 3) % 2 == 0, 1.0, 0.6)[:, None]
            rgb[closer] = _shade(color * stripes, n)
            best[closer] = t[closer]
    return np.isfinite(best), rgb


def render_fixture_view(kind: str, intrinsics: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """Exact RGBA uint8 image of the procedural scene; background is transparent."""
    rays = camera_rays(intrinsics, pose)
    o = rays.origins.astype(np.float64)
    d = rays.directions.astype(np.float64)
    hit, rgb = (_trace_cube if kind == "textured-cube" else _trace_spheres)(o, d)
    rgba = np.zeros((len(o), 4))
    rgba[:, :3] = rgb
    rgba[:, 3] = hit
    img = np.round(np.clip(rgba, 0, 1) * 255).astype(np.uint8)
    return img.reshape(intrinsics.height, intrinsics.width, 4)


def fixture_poses(spec: FixtureSpec) -> list[Pose]:
    """Camera poses on the upper hemisphere, looking at the origin."""
    rng = np.random.default_rng(spec.seed)
    min_z = np.sin(np.radians(spec.min_elevation_deg))
    poses = []
    while len(poses) < spec.num_views + spec.num_test_views:
        u = sample_hemisphere_direction((0.0, 0.0, 1.0), rng)
        if u[2] < min_z:
            continue
        poses.append(look_at(spec.radius * u, (0.0, 0.0, 0.0)))
    return poses


def make_fixture(spec: FixtureSpec, out_dir) -> Path:
    """Write ``transforms.json`` plus PNGs; frames carry a ``split`` tag."""
    out = Path(out_dir)
    intr = spec.intrinsics
    frames = []
    for k, pose in enumerate(fixture_poses(spec)):
        split = "train" if k < spec.num_views else "test"
        idx = k if split == "train" else k - spec.num_views
        rel = f"{split}/r_{idx}.png"
        (out / split).mkdir(parents=True, exist_ok=True)
        Image.fromarray(render_fixture_view(spec.kind, intr, pose), "RGBA").save(out / rel)
        frames.append({"file_path": rel, "split": split, "transform_matrix": pose.to_list()})
    meta = {"camera_angle_x": spec.camera_angle_x, "fixture": {"kind": spec.kind, "seed": spec.seed},
            "frames": frames}
    (out / "transforms.json").write_text(json.dumps(meta, indent=2))
    return out
