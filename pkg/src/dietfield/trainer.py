"""Single-scene optimization: ray-batch MSE plus periodic semantic consistency.

Each iteration renders a random batch of training rays and takes the color
MSE. Every ``sc_interval`` iterations a random pose is drawn, a strided image
is rendered there, and its embedding is pulled toward the precomputed
embedding of a random training view. Parameters are updated with Adam under
an exponentially decaying learning rate.

Random streams are independent per purpose (ray batches, render jitter,
consistency-step sampling, consistency-step jitter), so switching the
consistency term on or off leaves the ray batches unchanged.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import diffcore as dc
from .config import from_dict, to_dict
from .container import ContainerError, read_container, write_container
from .field import EncodingConfig, FieldConfig, FieldParams, init_params
from .losses import mse_rays, sc_cosine
from .posedist import Hemisphere, Interpolation, sample_pose
from .render import SamplingConfig, render_image, render_rays
from .scene import SceneDataset, rays_for_indices, strided_rays

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DNRF"
CHECKPOINT_VERSION = 1
STREAMS = ("rays", "render", "sc", "sc_render")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, message: str, checkpoint_path: Path | None = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    num_iters: int = 200_000
    ray_batch_size: int = 1024
    sc_interval: int = 10
    sc_weight: float = 0.1
    sc_render_stride: int = 2
    sc_perturb: bool = True
    lr_init: float = 5e-5
    lr_decay_rate: float = 0.1
    lr_decay_steps: int = 250_000
    finetune_iters: int = 0
    seed: int = 0
    regime: Literal["full", "simplified"] = "simplified"
    field: FieldConfig = FieldConfig(view_dependent=False)
    encoding: EncodingConfig = EncodingConfig(6, 4)
    sampling: SamplingConfig = SamplingConfig(n_coarse=128, n_fine=0)
    pose_dist: Literal["hemisphere", "interpolate"] = "hemisphere"
    radius_min: float | None = None
    radius_max: float | None = None
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    restart_on_degenerate: bool = False
    restart_check_iter: int = 2500

    def __post_init__(self):
        if self.sc_interval < 1:
            raise ValueError("sc_interval must be >= 1")
        if self.ray_batch_size < 1:
            raise ValueError("ray_batch_size must be >= 1")
        if self.sc_weight < 0:
            raise ValueError("sc_weight must be >= 0")
        if self.finetune_iters < 0 or self.num_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.sc_render_stride < 1:
            raise ValueError("sc_render_stride must be >= 1")

    @classmethod
    def for_regime(cls, regime: str, **overrides) -> "TrainConfig":
        """Defaults for the full two-network setup or the simplified single network."""
        if regime == "full":
            base = dict(regime="full", lr_init=5e-4, field=FieldConfig(view_dependent=True),
                        encoding=EncodingConfig(10, 4), sampling=SamplingConfig(64, 128))
        elif regime == "simplified":
            base = dict(regime="simplified")
        else:
            raise ValueError(f"unknown regime {regime!r}")
        base.update(overrides)
        return cls(**base)

    @property
    def two_networks(self) -> bool:
        return self.regime == "full" and self.sampling.n_fine > 0


def learning_rate(config: TrainConfig, it: int) -> float:
    return config.lr_init * config.lr_decay_rate ** (it / config.lr_decay_steps)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step; returns new params and state."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise dc.ShapeError("adam_update", params[name].shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = (b1 * state.m[name] + (1.0 - b1) * g).astype(np.float32)
        v = (b2 * state.v[name] + (1.0 - b2) * g * g).astype(np.float32)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - lr * step).astype(np.float32)
        m_new[name], v_new[name] = m, v
    return new_params, replace(state, m=m_new, v=v_new, t=t)


# ---------------------------------------------------------------------------
# logs and checkpoints

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    @property
    def sc_count(self) -> int:
        return sum("sc" in r for r in self.records)

    def extend(self, other: "TrainLog") -> None:
        self.records += other.records
        self.wall_ms += other.wall_ms
        self.events += other.events

    def jsonl_rows(self) -> list[dict]:
        return [{**r, "wall_ms": w} for r, w in zip(self.records, self.wall_ms)]


@dataclass(eq=False)
class Checkpoint:
    iteration: int
    params: dict[str, np.ndarray]
    adam: AdamState
    config: TrainConfig
    rng_states: dict[str, dict]
    restarts: int = 0
    phase: str = "train"
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "format": "dietfield-checkpoint",
        "iteration": ckpt.iteration,
        "phase": ckpt.phase,
        "restarts": ckpt.restarts,
        "config": to_dict(ckpt.config),
        "rng": ckpt.rng_states,
        "meta": ckpt.meta,
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2,
                 "eps": ckpt.adam.eps},
    }
    tensors = {f"params/{k}": v for k, v in ckpt.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in ckpt.adam.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in ckpt.adam.v.items()})
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, tensors)


def load_checkpoint(path) -> Checkpoint:
    header, tensors = read_container(path, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
    try:
        config = from_dict(TrainConfig, header["config"], "config")
        groups = {"params": {}, "adam_m": {}, "adam_v": {}}
        for name, arr in tensors.items():
            group, _, key = name.partition("/")
            groups[group][key] = arr
        adam = AdamState(groups["adam_m"], groups["adam_v"], **header["adam"])
        return Checkpoint(header["iteration"], groups["params"], adam, config, header["rng"],
                          header.get("restarts", 0), header.get("phase", "train"),
                          header.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"{path}: corrupt checkpoint ({exc})") from None


# ---------------------------------------------------------------------------
# training loop

def precompute_target_embeddings(dataset: SceneDataset, encoder) -> list[np.ndarray]:
    """One embedding per training view, in dataset order."""
    with dc.no_grad():
        return [encoder.encode(v.image).data.copy() for v in dataset.views]


def _int_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def initial_params(config: TrainConfig, seed: int) -> dict[str, np.ndarray]:
    params = {f"coarse.{k}": v for k, v in
              init_params(config.field, config.encoding, _int_seed(seed, 1)).tensors.items()}
    if config.two_networks:
        params.update({f"fine.{k}": v for k, v in
                       init_params(config.field, config.encoding, _int_seed(seed, 2)).tensors.items()})
    return params


def split_params(config: TrainConfig, flat: dict) -> tuple[FieldParams, FieldParams | None]:
    coarse = {k[len("coarse."):]: v for k, v in flat.items() if k.startswith("coarse.")}
    fine = {k[len("fine."):]: v for k, v in flat.items() if k.startswith("fine.")}
    make = lambda t: FieldParams(config.field, config.encoding, t)  # noqa: E731
    return make(coarse), (make(fine) if fine else None)


class Trainer:
    """Stateful runner for the training loop; resumable from a ``Checkpoint``."""

    def __init__(self, dataset: SceneDataset, config: TrainConfig, encoder=None,
                 params: dict[str, np.ndarray] | None = None, out_dir=None):
        if len(dataset) == 0:
            raise TrainingError("dataset has no views")
        if config.sc_weight > 0 and encoder is None:
            raise TrainingError("sc_weight > 0 needs an encoder")
        self.dataset, self.config, self.encoder = dataset, config, encoder
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.iteration = 0
        self.restarts = 0
        self.phase = "train"
        seqs = np.random.SeedSequence(config.seed).spawn(len(STREAMS))
        self.rngs = {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(STREAMS, seqs)}
        self.params = dict(params) if params is not None else initial_params(config, config.seed)
        self.adam = AdamState.zeros_like(self.params)
        self.log = TrainLog()
        self._images = dataset.images.reshape(-1, 3)
        self._targets = None
        self._pose_dist = None
        self.meta: dict = {}

    # -- setup helpers -----------------------------------------------------
    @property
    def targets(self) -> list[np.ndarray]:
        if self._targets is None:
            self._targets = precompute_target_embeddings(self.dataset, self.encoder)
        return self._targets

    @property
    def pose_dist(self):
        if self._pose_dist is None:
            c = self.config
            if c.pose_dist == "interpolate":
                self._pose_dist = Interpolation(self.dataset.poses, c.look_at, c.up)
            else:
                hemi = Hemisphere.around(self.dataset, c.look_at, c.up)
                self._pose_dist = Hemisphere(c.radius_min or hemi.radius_min,
                                             c.radius_max or hemi.radius_max, c.look_at, c.up)
        return self._pose_dist

    def fields(self, params=None):
        return split_params(self.config, self.params if params is None else params)

    # -- one iteration -----------------------------------------------------
    def _sample_batch(self):
        ds, n = self.dataset, self.config.ray_batch_size
        h, w = ds.intrinsics.height, ds.intrinsics.width
        flat = self.rngs["rays"].integers(len(ds) * h * w, size=n)
        view, pix = np.divmod(flat, h * w)
        row, col = np.divmod(pix, w)
        rays = rays_for_indices(ds.intrinsics, ds.poses, view, row, col)
        return rays, self._images[flat]

    def step(self, sc_enabled: bool = True) -> dict:
        c, ds = self.config, self.dataset
        it = self.iteration + 1
        lr = learning_rate(c, it)
        t0 = time.perf_counter()
        rays, gt = self._sample_batch()
        leaves = {k: dc.Tensor(v, requires_grad=True) for k, v in self.params.items()}
        coarse, fine = self.fields(leaves)
        out = render_rays(coarse, rays, ds.near, ds.far, c.sampling, self.rngs["render"], fine)
        mse = mse_rays(out.rgb, gt)
        loss = mse
        record = {"iter": it, "mse": float(mse.data)}
        if out.coarse is not None:
            mse_c = mse_rays(out.coarse.rgb, gt)
            loss = loss + mse_c
            record["mse_coarse"] = float(mse_c.data)
        if sc_enabled and c.sc_weight > 0 and it % c.sc_interval == 0:
            rng = self.rngs["sc"]
            target = self.targets[int(rng.integers(len(ds)))]
            pose = sample_pose(self.pose_dist, rng)
            image = render_image(coarse, ds.intrinsics, pose, c.sc_render_stride, ds.near, ds.far,
                                 replace(c.sampling, perturb=c.sc_perturb), self.rngs["sc_render"], fine)
            sc = sc_cosine(target, self.encoder.encode(image), c.sc_weight)
            loss = loss + sc
            record["sc"] = float(sc.data)
        record["lr"] = lr
        if not np.isfinite(loss.data).all():
            raise TrainingDiverged(f"non-finite loss at iteration {it}", self._diagnostic_checkpoint())
        grads = dc.backward(loss, leaves)
        self.params, self.adam = adam_update(self.params, grads, self.adam, lr)
        self.iteration = it
        if self.phase == "finetune":
            record["phase"] = "finetune"
        self.log.records.append(record)
        self.log.wall_ms.append(1000.0 * (time.perf_counter() - t0))
        if c.restart_on_degenerate and self.phase == "train" and it == c.restart_check_iter:
            self._maybe_restart()
        return record

    def run(self, num_iters: int | None = None, callback=None) -> TrainLog:
        n = self.config.num_iters - self.iteration if num_iters is None else num_iters
        for _ in range(max(n, 0)):
            record = self.step(sc_enabled=self.phase == "train")
            if callback is not None:
                callback(self, record)
        return self.log

    def finetune(self, num_iters: int | None = None, callback=None) -> TrainLog:
        """Continue with the MSE term alone; the optimizer state carries over."""
        self.phase = "finetune"
        return self.run(self.config.finetune_iters if num_iters is None else num_iters, callback)

    # -- degenerate-run restarts --------------------------------------------
    def degenerate(self, opacity: float = 0.99, fraction: float = 0.95) -> bool:
        """Whether a probe render of the first view is almost entirely opaque."""
        ds = self.dataset
        coarse, fine = self.fields()
        rays = strided_rays(ds.intrinsics, ds.poses[0], self.config.sc_render_stride)
        with dc.no_grad():
            out = render_rays(coarse, rays, ds.near, ds.far, replace(self.config.sampling, perturb=False),
                              None, fine)
        return float(np.mean(out.acc.data > opacity)) > fraction

    def _maybe_restart(self) -> None:
        if not self.degenerate():
            return
        self.restarts += 1
        seed = self.config.seed + self.restarts
        log.warning("degenerate render at iteration %d; reinitializing with seed %d", self.iteration, seed)
        self.params = initial_params(self.config, seed)
        self.adam = AdamState.zeros_like(self.params)
        self.log.events.append({"iter": self.iteration, "event": "restart", "seed": seed})

    # -- checkpoints ---------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.iteration, dict(self.params), self.adam, self.config,
                          {k: r.bit_generator.state for k, r in self.rngs.items()}, self.restarts, self.phase,
                          dict(self.meta))

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: SceneDataset, encoder=None, out_dir=None) -> "Trainer":
        trainer = cls(dataset, ckpt.config, encoder, ckpt.params, out_dir)
        trainer.iteration, trainer.restarts, trainer.phase = ckpt.iteration, ckpt.restarts, ckpt.phase
        trainer.meta = dict(ckpt.meta)
        trainer.adam = AdamState({k: v.copy() for k, v in ckpt.adam.m.items()},
                                 {k: v.copy() for k, v in ckpt.adam.v.items()},
                                 ckpt.adam.t, ckpt.adam.beta1, ckpt.adam.beta2, ckpt.adam.eps)
        for name, state in ckpt.rng_states.items():
            trainer.rngs[name].bit_generator.state = state
        return trainer

    def _diagnostic_checkpoint(self) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"diverged_{self.iteration:07d}.ckpt"
        self.save(path)
        return path


def train(dataset: SceneDataset, config: TrainConfig, encoder=None, params=None
          ) -> tuple[dict[str, np.ndarray], TrainLog]:
    """Run ``config.num_iters`` iterations from a fresh (or given) initialization."""
    trainer = Trainer(dataset, config, encoder, params)
    trainer.run()
    return trainer.params, trainer.log


def finetune_mse(params: dict[str, np.ndarray], dataset: SceneDataset, config: TrainConfig,
                 adam: AdamState | None = None, start_iter: int | None = None
                 ) -> tuple[dict[str, np.ndarray], TrainLog]:
    """``config.finetune_iters`` MSE-only iterations starting from ``params``.

    The learning-rate schedule resumes at ``start_iter`` (default
    ``config.num_iters``).
    """
    trainer = Trainer(dataset, replace(config, sc_weight=0.0), None, params)
    trainer.iteration = config.num_iters if start_iter is None else start_iter
    if adam is not None:
        trainer.adam = adam
    trainer.finetune(config.finetune_iters)
    return trainer.params, trainer.log
