"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from numbers import Integral, Real

import numpy as np
from sklearn.utils.validation import check_scalar

from .scene import Pose, SceneDataset, SceneError


def check_pose(pose) -> Pose:
    """Accept a ``Pose`` or anything convertible to a valid 4x4 camera-to-world matrix."""
    if isinstance(pose, Pose):
        return pose
    return Pose(np.asarray(pose, dtype=np.float64))


def check_poses(poses) -> list[Pose]:
    if isinstance(poses, Pose) or (isinstance(poses, np.ndarray) and poses.ndim == 2):
        return [check_pose(poses)]
    out = [check_pose(p) for p in poses]
    if not out:
        raise SceneError("need at least one pose")
    return out


def check_image(image, name: str = "image") -> np.ndarray:
    """HxWx3 float32 in [0, 1]; uint8 input is rescaled."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected HxWx3, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: values outside [0, 1]")
    return arr


def check_dataset(dataset, min_views: int = 1) -> SceneDataset:
    if not isinstance(dataset, SceneDataset):
        raise TypeError(f"expected a SceneDataset, got {type(dataset).__name__}")
    if len(dataset) < min_views:
        raise SceneError(f"need at least {min_views} views, got {len(dataset)}")
    return dataset


def check_positive_int(value, name: str, min_val: int = 1) -> int:
    return int(check_scalar(value, name, Integral, min_val=min_val))


def check_nonnegative(value, name: str) -> float:
    return float(check_scalar(value, name, Real, min_val=0.0))
