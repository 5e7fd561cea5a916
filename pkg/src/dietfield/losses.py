"""Reconstruction and semantic consistency objectives.

Squared color errors are summed over RGB and averaged over rays (or pixels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class LossError(ValueError):
    pass


@dataclass
class LossValue:
    value: Tensor
    breakdown: dict[str, float] = field(default_factory=dict)


def mse_rays(pred_rgb, gt_rgb) -> Tensor:
    """Mean over rays of the squared RGB error norm."""
    pred, gt = dc.as_tensor(pred_rgb), dc.as_tensor(gt_rgb)
    if pred.shape != gt.shape:
        raise dc.ShapeError("mse_rays", pred.shape, gt.shape)
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise LossError(f"mse_rays needs a non-empty N x 3 batch, got {pred.shape}")
    return dc.sum_(dc.square(pred - gt)) * (1.0 / pred.shape[0])


def mse_full(image, rendered) -> Tensor:
    """Squared error summed over channels, averaged over the H*W pixels."""
    a, b = dc.as_tensor(image), dc.as_tensor(rendered)
    if a.shape != b.shape or a.ndim != 3:
        raise dc.ShapeError("mse_full", a.shape, b.shape)
    h, w, c = a.shape
    return mse_rays(dc.reshape(a, (h * w, c)), dc.reshape(b, (h * w, c)))


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise dc.ShapeError(op, a.shape, b.shape)
    return a, b


def sc_l2(emb_target, emb_rendered, weight: float) -> Tensor:
    """``weight / 2 * ||target - rendered||^2``."""
    a, b = _pair(emb_target, emb_rendered, "sc_l2")
    return dc.sum_(dc.square(a - b)) * (0.5 * weight)


def sc_cosine(emb_target, emb_rendered, weight: float) -> Tensor:
    """``weight * (1 - cos(target, rendered))``; inputs are renormalized first.

    Minimizing this maximizes the similarity of the two embeddings.
    """
    a, b = _pair(emb_target, emb_rendered, "sc_cosine")
    for v, role in ((a, "target"), (b, "rendered")):
        if not np.any(v.data):
            raise LossError(f"sc_cosine: {role} embedding is the zero vector")
    a = a / dc.sqrt(dc.sum_(dc.square(a)))
    b = b / dc.sqrt(dc.sum_(dc.square(b)))
    return (1.0 - dc.dot(a, b)) * weight
