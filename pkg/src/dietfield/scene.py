"""Posed multi-view datasets in the NeRF synthetic convention, and camera rays.

Camera space looks down -z with +x right and +y up. ``transform_matrix`` in
``transforms.json`` maps camera coordinates to world coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

DEFAULT_NEAR = 2.0
DEFAULT_FAR = 6.0
ORTHO_TOL = 1e-4


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    height: int
    width: int
    focal: float

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise SceneError(f"image size must be positive, got {self.height}x{self.width}")
        if not self.focal > 0:
            raise SceneError(f"focal must be positive, got {self.focal}")

    @classmethod
    def from_fov(cls, height: int, width: int, camera_angle_x: float) -> "CameraIntrinsics":
        return cls(height, width, 0.5 * width / math.tan(0.5 * camera_angle_x))

    @property
    def camera_angle_x(self) -> float:
        return 2.0 * math.atan(0.5 * self.width / self.focal)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform (4x4, float64)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        validate_pose_matrix(m)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def to_list(self) -> list[list[float]]:
        return self.matrix.tolist()


def validate_pose_matrix(m: np.ndarray) -> None:
    if m.shape != (4, 4):
        raise SceneError(f"pose must be 4x4, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise SceneError("pose has non-finite entries")
    if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-6):
        raise SceneError(f"pose last row must be (0,0,0,1), got {m[3].tolist()}")
    r = m[:3, :3]
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > ORTHO_TOL:
        raise SceneError(f"pose rotation is not orthonormal (max |R^T R - I| = {err:.2e})")
    if np.linalg.det(r) < 0:
        raise SceneError("pose rotation has det -1 (reflection)")


@dataclass(frozen=True, eq=False)
class PosedImage:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    pose: Pose


@dataclass(frozen=True, eq=False)
class SceneDataset:
    intrinsics: CameraIntrinsics
    views: tuple[PosedImage, ...]
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        if not 0 < self.near < self.far:
            raise SceneError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        h, w = self.intrinsics.height, self.intrinsics.width
        for k, v in enumerate(self.views):
            if v.image.shape != (h, w, 3):
                raise SceneError(f"view {k}: image shape {v.image.shape} != {(h, w, 3)}")

    def __len__(self) -> int:
        return len(self.views)

    @property
    def images(self) -> np.ndarray:
        return np.stack([v.image for v in self.views]) if self.views else np.zeros((0, 0, 0, 3))

    @property
    def poses(self) -> list[Pose]:
        return [v.pose for v in self.views]

    def select(self, indices: Sequence[int]) -> "SceneDataset":
        return replace(self, views=tuple(self.views[i] for i in indices))


@dataclass(frozen=True, eq=False)
class RayBundle:
    origins: np.ndarray  # N x 3
    directions: np.ndarray  # N x 3, unit
    pixels: np.ndarray | None = None  # N x 2 (row, col)
    grid_shape: tuple[int, int] | None = field(default=None)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, sl) -> "RayBundle":
        pix = None if self.pixels is None else self.pixels[sl]
        return RayBundle(self.origins[sl], self.directions[sl], pix)


# ---------------------------------------------------------------------------
# loading

def _composite(pixels: np.ndarray, background) -> np.ndarray:
    rgb = pixels[..., :3].astype(np.float32) / 255.0
    if pixels.shape[-1] == 4:
        alpha = pixels[..., 3:4].astype(np.float32) / 255.0
        rgb = rgb * alpha + np.asarray(background, np.float32) * (1.0 - alpha)
    return rgb


def box_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = image.shape
    if h % factor or w % factor:
        raise SceneError(f"image {h}x{w} not divisible by downsample factor {factor}")
    return image.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def _resolve_image(root: Path, file_path: str) -> Path:
    p = (root / file_path)
    if p.is_file():
        return p
    with_ext = p.with_name(p.name + ".png")
    if with_ext.is_file():
        return with_ext
    raise SceneError(f"missing image {file_path!r} under {root}")


def load_scene(directory, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR,
               background=(1.0, 1.0, 1.0), split: str | None = None,
               downsample: int | None = None) -> SceneDataset:
    """Load ``transforms.json`` and its PNGs from ``directory``.

    With ``split`` set, ``transforms_{split}.json`` is used if present,
    otherwise frames of ``transforms.json`` are filtered on their ``split``
    key. ``downsample=None`` halves 800-pixel-wide inputs with a 2x2 box
    filter and leaves other sizes alone.
    """
    root = Path(directory)
    meta_path = root / "transforms.json"
    if split is not None and (root / f"transforms_{split}.json").is_file():
        meta_path = root / f"transforms_{split}.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise SceneError(f"missing {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise SceneError(f"{meta_path}: malformed JSON ({exc})") from None
    if not isinstance(meta, dict) or "camera_angle_x" not in meta or "frames" not in meta:
        raise SceneError(f"{meta_path}: need 'camera_angle_x' and 'frames'")

    frames = meta["frames"]
    if split is not None and meta_path.name == "transforms.json":
        frames = [f for f in frames if f.get("split", "train") == split]

    views, size = [], None
    for k, frame in enumerate(frames):
        try:
            file_path, matrix = frame["file_path"], frame["transform_matrix"]
        except (KeyError, TypeError):
            raise SceneError(f"{meta_path}: frame {k} needs 'file_path' and 'transform_matrix'") from None
        try:
            pose = Pose(np.asarray(matrix, dtype=np.float64))
        except SceneError as exc:
            raise SceneError(f"frame {k} ({file_path}): {exc}") from None
        with Image.open(_resolve_image(root, file_path)) as im:
            pixels = np.asarray(im.convert("RGBA" if im.mode in ("RGBA", "LA", "P") else "RGB"))
        if size is None:
            size = pixels.shape[:2]
        elif pixels.shape[:2] != size:
            raise SceneError(f"frame {k} ({file_path}): size {pixels.shape[:2]} != {size}")
        image = _composite(pixels, background)
        factor = downsample if downsample is not None else (2 if image.shape[1] == 800 else 1)
        if factor > 1:
            image = box_downsample(image, factor)
        views.append(PosedImage(np.ascontiguousarray(image, dtype=np.float32), pose))

    if not views:
        raise SceneError(f"{meta_path}: no frames" + (f" in split {split!r}" if split else ""))
    h, w = views[0].image.shape[:2]
    intrinsics = CameraIntrinsics.from_fov(h, w, float(meta["camera_angle_x"]))
    return SceneDataset(intrinsics, views, near, far, tuple(float(c) for c in background), root.name)


def subsample_views(dataset: SceneDataset, k: int, seed: int) -> SceneDataset:
    """Keep ``k`` views chosen uniformly without replacement, in original order."""
    n = len(dataset)
    if not 1 <= k <= n:
        raise SceneError(f"k must be in [1, {n}], got {k}")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return dataset.select(idx.tolist())


# ---------------------------------------------------------------------------
# rays

def _rays_for_pixels(intrinsics: CameraIntrinsics, pose: Pose, rows: np.ndarray,
                     cols: np.ndarray) -> RayBundle:
    ii, jj = np.meshgrid(rows, cols, indexing="ij")
    f, h, w = intrinsics.focal, intrinsics.height, intrinsics.width
    cam = np.stack([(jj + 0.5 - w / 2) / f, -(ii + 0.5 - h / 2) / f, -np.ones_like(ii, float)], -1)
    world = cam.reshape(-1, 3) @ pose.rotation.T
    world /= np.linalg.norm(world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.origin, world.shape)
    pixels = np.stack([ii.reshape(-1), jj.reshape(-1)], -1)
    return RayBundle(origins.astype(np.float32), world.astype(np.float32), pixels,
                     (len(rows), len(cols)))


def camera_rays(intrinsics: CameraIntrinsics, pose: Pose) -> RayBundle:
    """One ray per pixel, row-major."""
    return _rays_for_pixels(intrinsics, pose, np.arange(intrinsics.height), np.arange(intrinsics.width))


def strided_rays(intrinsics: CameraIntrinsics, pose: Pose, stride: int) -> RayBundle:
    """Rays through every ``stride``-th pixel in both directions, row-major."""
    if stride < 1:
        raise SceneError(f"stride must be >= 1, got {stride}")
    return _rays_for_pixels(intrinsics, pose, np.arange(0, intrinsics.height, stride),
                            np.arange(0, intrinsics.width, stride))


def rays_for_indices(intrinsics: CameraIntrinsics, poses: Sequence[Pose], view_idx: np.ndarray,
                     rows: np.ndarray, cols: np.ndarray) -> RayBundle:
    """Rays for arbitrary (view, row, col) triples, as drawn for a training batch."""
    f, h, w = intrinsics.focal, intrinsics.height, intrinsics.width
    rot = np.stack([poses[v].rotation for v in range(len(poses))])[view_idx]
    org = np.stack([poses[v].origin for v in range(len(poses))])[view_idx]
    cam = np.stack([(cols + 0.5 - w / 2) / f, -(rows + 0.5 - h / 2) / f, -np.ones(len(rows))], -1)
    world = np.einsum("nij,nj->ni", rot, cam)
    world /= np.linalg.norm(world, axis=-1, keepdims=True)
    return RayBundle(org.astype(np.float32), world.astype(np.float32), np.stack([rows, cols], -1))
