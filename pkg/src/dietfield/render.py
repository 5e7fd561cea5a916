"""Quadrature of the volume rendering integral along ray bundles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .field import FieldParams, field_eval
from .scene import CameraIntrinsics, Pose, RayBundle, strided_rays

TERMINAL_DELTA = 1e10
PDF_FLOOR = 1e-5


@dataclass(frozen=True)
class SamplingConfig:
    n_coarse: int = 64
    n_fine: int = 128
    perturb: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    chunk_size: int = 4096
    terminal_delta: float = TERMINAL_DELTA

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValueError("n_coarse must be >= 2")
        if self.n_fine < 0:
            raise ValueError("n_fine must be >= 0")


@dataclass(eq=False)
class SampleSet:
    t: np.ndarray  # rays x samples, increasing per ray
    deltas: np.ndarray  # rays x samples, > 0

    @property
    def shape(self):
        return self.t.shape


@dataclass(eq=False)
class RenderOutput:
    rgb: Tensor  # rays x 3
    weights: Tensor  # rays x samples
    acc: Tensor  # rays
    depth: np.ndarray  # rays
    samples: SampleSet | None = None
    coarse: "RenderOutput | None" = None


def deltas_from_t(t: np.ndarray, terminal: float | np.ndarray = TERMINAL_DELTA) -> np.ndarray:
    """Spacing to the next sample; the last sample gets ``terminal``."""
    last = np.broadcast_to(np.asarray(terminal, np.float32), t.shape[:-1] + (1,))
    return np.concatenate([np.diff(t, axis=-1), last], axis=-1).astype(np.float32)


def stratified_samples(near: float, far: float, n_coarse: int, rng: np.random.Generator | None = None,
                       perturb: bool = False, n_rays: int = 1,
                       terminal: float = TERMINAL_DELTA, jitter: np.ndarray | None = None) -> SampleSet:
    """One sample per equal-width bin of [near, far]: midpoints, or uniform in-bin when perturbed.

    ``jitter`` (rays x n_coarse, in [0, 1)) overrides the draws from ``rng``.
    """
    if not near < far:
        raise ValueError("need near < far")
    if n_coarse < 2:
        raise ValueError("n_coarse must be >= 2")
    width = (far - near) / n_coarse
    lower = near + width * np.arange(n_coarse, dtype=np.float64)
    if perturb:
        if jitter is None:
            jitter = rng.random((n_rays, n_coarse))
        t = lower + width * jitter
    else:
        t = np.broadcast_to(lower + 0.5 * width, (n_rays, n_coarse))
    t = np.ascontiguousarray(t, dtype=np.float32)
    return SampleSet(t, deltas_from_t(t, terminal))


def _bin_edges(t: np.ndarray, near: float | None, far: float | None) -> np.ndarray:
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    lo = t[:, :1] - (t[:, 1:2] - t[:, :1]) / 2 if near is None else np.full_like(t[:, :1], near)
    hi = t[:, -1:] + (t[:, -1:] - t[:, -2:-1]) / 2 if far is None else np.full_like(t[:, :1], far)
    return np.concatenate([lo, mids, hi], axis=1)


def sample_pdf(edges: np.ndarray, weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-transform sampling of a per-row piecewise-constant density.

    ``edges`` is rows x (bins + 1), ``weights`` rows x bins, ``u`` rows x k in [0, 1).
    """
    w = np.asarray(weights, np.float64) + PDF_FLOOR
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(pdf), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    bins = pdf.shape[1]
    # searchsorted per row: offset each row by its index so one flat search suffices
    offset = 2.0 * np.arange(len(pdf))[:, None]
    idx = np.searchsorted((cdf + offset).ravel(), (u + offset).ravel(), side="right")
    idx = idx.reshape(u.shape) - np.arange(len(pdf))[:, None] * (bins + 1) - 1
    idx = np.clip(idx, 0, bins - 1)
    c_lo = np.take_along_axis(cdf, idx, 1)
    p = np.take_along_axis(pdf, idx, 1)
    e_lo = np.take_along_axis(edges, idx, 1)
    e_hi = np.take_along_axis(edges, idx + 1, 1)
    frac = np.clip((u - c_lo) / p, 0.0, 1.0)
    return e_lo + frac * (e_hi - e_lo)


def hierarchical_samples(coarse_t: np.ndarray, coarse_weights, n_fine: int,
                         rng: np.random.Generator | None = None, near: float | None = None,
                         far: float | None = None, perturb: bool = True,
                         terminal: float = TERMINAL_DELTA, u: np.ndarray | None = None) -> SampleSet:
    """Draw ``n_fine`` extra samples from the coarse weights and merge them in.

    Bin ``i`` spans the midpoints around coarse sample ``i`` (clipped to
    near/far when given) and has mass proportional to ``weights[i] + 1e-5``,
    so all-zero weights degrade to uniform sampling. Without ``perturb`` the
    draws are evenly spaced quantiles.
    """
    coarse_t = np.atleast_2d(coarse_t)
    w = coarse_weights.data if isinstance(coarse_weights, Tensor) else np.asarray(coarse_weights)
    w = np.maximum(np.atleast_2d(w), 0.0)
    if u is None:
        if perturb:
            u = rng.random((coarse_t.shape[0], n_fine))
        else:
            u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (coarse_t.shape[0], n_fine))
    fine = sample_pdf(_bin_edges(coarse_t.astype(np.float64), near, far), w, u)
    merged = np.sort(np.concatenate([coarse_t, fine.astype(np.float32)], axis=1), axis=1)
    return SampleSet(merged, deltas_from_t(merged, terminal))


def composite(rgb, sigma, samples: SampleSet, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Alpha-composite per-sample colors (rays x samples x 3) and densities (rays x samples).

    ``background=None`` composites onto black without the background term.
    """
    rgb, sigma = dc.as_tensor(rgb), dc.as_tensor(sigma)
    if sigma.shape != samples.shape or rgb.shape != samples.shape + (3,):
        raise dc.ShapeError("composite", rgb.shape, sigma.shape, samples.shape)
    tau = sigma * samples.deltas
    alpha = 1.0 - dc.exp(-tau)
    # exclusive prefix sum built from the first n-1 terms: subtracting the
    # (possibly 1e10-scaled) last term from an inclusive sum would lose precision
    n = samples.shape[1]
    before = dc.concat([np.zeros((samples.shape[0], 1), np.float32),
                        dc.cumsum(tau[:, : n - 1], axis=1)], axis=1)
    weights = dc.exp(-before) * alpha
    acc = dc.sum_(weights, axis=1)
    color = dc.sum_(dc.reshape(weights, weights.shape + (1,)) * rgb, axis=1)
    if background is not None:
        bg = np.asarray(background, np.float32).reshape(1, 3)
        color = color + dc.reshape(1.0 - acc, (acc.shape[0], 1)) * bg
    depth = (weights.data * samples.t).sum(axis=1) / np.maximum(acc.data, 1e-10)
    return RenderOutput(color, weights, acc, depth.astype(np.float32), samples)


def _eval_samples(field: FieldParams, rays: RayBundle, samples: SampleSet):
    r, s = samples.shape
    pts = rays.origins[:, None, :] + samples.t[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], (r, s, 3)).reshape(-1, 3)
    out = field_eval(field, pts.reshape(-1, 3).astype(np.float32), dirs)
    return dc.reshape(out.rgb, (r, s, 3)), dc.reshape(out.sigma, (r, s))


def _render_chunk(field, fine_field, rays, near, far, config, jitter, u) -> RenderOutput:
    samples = stratified_samples(near, far, config.n_coarse, perturb=config.perturb, n_rays=len(rays),
                                 terminal=config.terminal_delta, jitter=jitter)
    rgb, sigma = _eval_samples(field, rays, samples)
    coarse = composite(rgb, sigma, samples, config.background)
    if config.n_fine == 0:
        return coarse
    merged = hierarchical_samples(samples.t, coarse.weights.data, config.n_fine, near=near, far=far,
                                  perturb=config.perturb, terminal=config.terminal_delta, u=u)
    rgb, sigma = _eval_samples(fine_field or field, rays, merged)
    fine = composite(rgb, sigma, merged, config.background)
    fine.coarse = coarse
    return fine


def _cat_outputs(parts: list[RenderOutput]) -> RenderOutput:
    if len(parts) == 1:
        return parts[0]
    out = RenderOutput(
        dc.concat([p.rgb for p in parts]), dc.concat([p.weights for p in parts]),
        dc.concat([p.acc for p in parts]), np.concatenate([p.depth for p in parts]),
        SampleSet(np.concatenate([p.samples.t for p in parts]),
                  np.concatenate([p.samples.deltas for p in parts])))
    if parts[0].coarse is not None:
        out.coarse = _cat_outputs([p.coarse for p in parts])
    return out


def render_rays(field: FieldParams, rays: RayBundle, near: float, far: float,
                config: SamplingConfig, rng: np.random.Generator | None = None,
                fine_field: FieldParams | None = None) -> RenderOutput:
    """Stratified pass, optional hierarchical pass, composite; chunked over rays.

    All random numbers are drawn up front for the whole bundle, so the result
    does not depend on ``config.chunk_size``. With ``n_fine > 0`` and no
    ``fine_field`` the same network serves both passes.
    """
    n = len(rays)
    jitter = rng.random((n, config.n_coarse)) if config.perturb else None
    u = rng.random((n, config.n_fine)) if (config.perturb and config.n_fine) else None
    parts = []
    for lo in range(0, n, config.chunk_size):
        hi = min(n, lo + config.chunk_size)
        parts.append(_render_chunk(field, fine_field, rays[lo:hi], near, far, config,
                                   None if jitter is None else jitter[lo:hi],
                                   None if u is None else u[lo:hi]))
    return _cat_outputs(parts)


def render_image(field: FieldParams, intrinsics: CameraIntrinsics, pose: Pose, stride: int,
                 near: float, far: float, config: SamplingConfig,
                 rng: np.random.Generator | None = None, fine_field: FieldParams | None = None) -> Tensor:
    """Render the strided pixel grid as a ceil(H/stride) x ceil(W/stride) x 3 image."""
    rays = strided_rays(intrinsics, pose, stride)
    out = render_rays(field, rays, near, far, config, rng, fine_field)
    rows, cols = rays.grid_shape
    return dc.reshape(out.rgb, (rows, cols, 3))
