"""Image quality metrics and the cross-view embedding similarity analysis."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .scene import SceneDataset

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(image, rendered) -> float:
    """-10 log10 of the per-element MSE; ``inf`` for identical images."""
    a, b = _pair(image, rendered, "psnr")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)


def ssim(image, rendered, data_range: float = 1.0) -> float:
    """Mean SSIM with a 7x7 uniform window, averaged over channels.

    Follows scikit-image's default behaviour: sample covariances, and the
    mean taken over the region where the window fits entirely.
    """
    a, b = _pair(image, rendered, "ssim")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    n = SSIM_WINDOW ** 2
    cov_norm = n / (n - 1)
    pad = (SSIM_WINDOW - 1) // 2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        filt = lambda z: uniform_filter(z, size=SSIM_WINDOW)  # noqa: E731
        ux, uy = filt(x), filt(y)
        vx = cov_norm * (filt(x * x) - ux * ux)
        vy = cov_norm * (filt(y * y) - uy * uy)
        vxy = cov_norm * (filt(x * y) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        scores.append(s[pad:h - pad, pad:w - pad].mean())
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# embedding similarity

@dataclass
class PairGroup:
    scene_a: str
    scene_b: str
    cosines: list[float] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)

    @property
    def same_scene(self) -> bool:
        return self.scene_a == self.scene_b

    @property
    def mean_similarity(self) -> float:
        return float(np.mean(self.cosines)) if self.cosines else float("nan")

    def histogram(self, bins: int = 20) -> dict:
        counts, edges = np.histogram(self.cosines, bins=bins, range=(-1.0, 1.0))
        return {"counts": counts.tolist(), "edges": edges.tolist()}


@dataclass
class SimilarityReport:
    groups: list[PairGroup]

    def summary(self) -> dict:
        return {f"{g.scene_a}|{g.scene_b}": g.mean_similarity for g in self.groups}

    def to_dict(self, bins: int = 20) -> dict:
        return {
            "groups": [
                {"scene_a": g.scene_a, "scene_b": g.scene_b, "same_scene": g.same_scene,
                 "mean_similarity": g.mean_similarity, "histogram": g.histogram(bins),
                 "samples": [{"cosine": c, "distance": d} for c, d in zip(g.cosines, g.distances)]}
                for g in self.groups
            ],
            "summary": self.summary(),
        }

    def write(self, out_dir, stem: str = "embedding_similarity") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scene_a", "scene_b", "cosine", "distance"])
            for g in self.groups:
                for c, d in zip(g.cosines, g.distances):
                    writer.writerow([g.scene_a, g.scene_b, repr(c), repr(d)])
        return json_path, csv_path


def embedding_similarity_report(scenes: Sequence[SceneDataset], encoder, num_pairs: int,
                                rng: np.random.Generator, names: Sequence[str] | None = None
                                ) -> SimilarityReport:
    """Cosine similarity vs camera distance for random view pairs.

    Every unordered scene pair, including each scene with itself, gets
    ``num_pairs`` samples; the two views are drawn independently, so a view
    can be paired with itself.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    names = list(names) if names is not None else [s.name or f"scene{i}" for i, s in enumerate(scenes)]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    embeddings = [np.stack([encoder.encode(v.image).data.astype(np.float64) for v in s.views])
                  for s in scenes]
    groups = []
    for a, b in itertools.combinations_with_replacement(range(len(scenes)), 2):
        group = PairGroup(names[a], names[b])
        ia = rng.integers(len(scenes[a]), size=num_pairs)
        ib = rng.integers(len(scenes[b]), size=num_pairs)
        for i, j in zip(ia, ib):
            cos = float(np.clip(embeddings[a][i] @ embeddings[b][j], -1.0, 1.0))
            dist = float(np.linalg.norm(scenes[a].views[i].pose.origin - scenes[b].views[j].pose.origin))
            group.cosines.append(cos)
            group.distances.append(dist)
        groups.append(group)
    return SimilarityReport(groups)
