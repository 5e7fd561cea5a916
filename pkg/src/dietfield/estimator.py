"""scikit-learn style wrapper around the trainer.

``fit`` takes a ``SceneDataset`` (there is no separate target), ``predict``
renders poses, and ``score`` is the mean PSNR on a held-out dataset.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import diffcore as dc
from .metrics import psnr
from .render import render_image
from .scene import SceneDataset
from .semantic import BaselineEncoder
from .trainer import Trainer, TrainConfig
from .validation import (check_dataset, check_nonnegative, check_poses, check_positive_int)


class DietNeRF(BaseEstimator):
    """Radiance field fitted to a few posed images with optional semantic consistency.

    ``encoder`` is ``"baseline"`` or any object with an ``encode(image)``
    method returning a unit-norm tensor. Set ``sc_weight=0`` for a plain
    MSE-only fit.
    """

    def __init__(self, regime: str = "simplified", num_iters: int = 5000, ray_batch_size: int = 256,
                 sc_weight: float = 0.1, sc_interval: int = 10, sc_render_stride: int = 2,
                 lr_init: float = 1e-3, lr_decay_steps: int = 5000, depth: int = 4, width: int = 64,
                 n_coarse: int = 32, num_freqs_position: int = 6, finetune_iters: int = 0,
                 encoder="baseline", random_state: int = 0):
        self.regime = regime
        self.num_iters = num_iters
        self.ray_batch_size = ray_batch_size
        self.sc_weight = sc_weight
        self.sc_interval = sc_interval
        self.sc_render_stride = sc_render_stride
        self.lr_init = lr_init
        self.lr_decay_steps = lr_decay_steps
        self.depth = depth
        self.width = width
        self.n_coarse = n_coarse
        self.num_freqs_position = num_freqs_position
        self.finetune_iters = finetune_iters
        self.encoder = encoder
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        check_positive_int(self.num_iters, "num_iters", 0)
        check_positive_int(self.depth, "depth")
        check_positive_int(self.width, "width")
        check_nonnegative(self.sc_weight, "sc_weight")
        base = TrainConfig.for_regime(self.regime)
        skip = (self.depth // 2,) if self.depth > 2 else ()
        return replace(
            base, num_iters=self.num_iters, ray_batch_size=self.ray_batch_size, sc_weight=self.sc_weight,
            sc_interval=self.sc_interval, sc_render_stride=self.sc_render_stride, lr_init=self.lr_init,
            lr_decay_steps=self.lr_decay_steps, finetune_iters=self.finetune_iters, seed=self.random_state,
            field=replace(base.field, depth=self.depth, width=self.width, skip_layers=skip),
            encoding=replace(base.encoding, num_freqs_position=self.num_freqs_position),
            sampling=replace(base.sampling, n_coarse=self.n_coarse),
        )

    def _encoder(self):
        if self.sc_weight == 0:
            return None
        if isinstance(self.encoder, str):
            if self.encoder != "baseline":
                raise ValueError(f"unknown encoder {self.encoder!r}; pass an encoder object")
            return BaselineEncoder(self.random_state)
        return self.encoder

    def fit(self, X: SceneDataset, y=None) -> "DietNeRF":
        dataset = check_dataset(X)
        config = self._train_config()
        trainer = Trainer(dataset, config, self._encoder())
        trainer.run()
        if config.finetune_iters:
            trainer.finetune()
        self.trainer_ = trainer
        self.params_ = trainer.params
        self.log_ = trainer.log
        self.scene_ = {"intrinsics": dataset.intrinsics, "near": dataset.near, "far": dataset.far,
                       "background": dataset.background}
        self.n_iter_ = trainer.iteration
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predict or score")

    def predict(self, X, stride: int = 1, intrinsics=None) -> np.ndarray:
        """Render each pose of ``X`` (poses, or a dataset's poses); returns (N, H, W, 3)."""
        self._check_fitted()
        if isinstance(X, SceneDataset):
            poses, intrinsics = X.poses, intrinsics or X.intrinsics
        else:
            poses = check_poses(X)
        intr = intrinsics or self.scene_["intrinsics"]
        coarse, fine = self.trainer_.fields()
        cfg = replace(self.trainer_.config.sampling, perturb=False, background=self.scene_["background"])
        with dc.no_grad():
            return np.stack([render_image(coarse, intr, p, stride, self.scene_["near"], self.scene_["far"],
                                          cfg, None, fine).data for p in poses])

    def score(self, X: SceneDataset, y=None) -> float:
        """Mean PSNR over the views of ``X``."""
        dataset = check_dataset(X)
        preds = self.predict(dataset)
        return float(np.mean([psnr(v.image, p) for v, p in zip(dataset.views, preds)]))
