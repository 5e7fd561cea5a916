"""Command line entry point: ``dietfield make-fixture|train|render|eval|embed-analysis``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Optional, get_type_hints

import numpy as np
from PIL import Image

from . import diffcore as dc
from .config import ConfigError, from_dict, to_dict
from .container import ContainerError
from .fixtures import FixtureSpec, make_fixture
from .metrics import embedding_similarity_report, psnr, ssim
from .posedist import orbit_poses
from .render import render_image
from .scene import CameraIntrinsics, SceneError, load_scene, subsample_views
from .semantic import BaselineEncoder, load_vit
from .trainer import Trainer, TrainConfig, TrainingDiverged, load_checkpoint, split_params

log = logging.getLogger("dietfield")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


# ---------------------------------------------------------------------------
# run configuration

@dataclass(frozen=True)
class SceneSection:
    path: str = ""
    near: float = 2.0
    far: float = 6.0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    split: str | None = "train"
    num_views: int | None = None
    view_seed: int = 0
    downsample: int | None = None


@dataclass(frozen=True)
class FieldSection:
    regime: Literal["full", "simplified"] = "simplified"
    depth: int | None = None
    width: int | None = None
    skip_layers: tuple[int, ...] | None = None
    L_x: int | None = None
    L_d: int | None = None
    view_dependent: bool | None = None


@dataclass(frozen=True)
class SamplingSection:
    n_coarse: int | None = None
    n_fine: int | None = None
    perturb: bool = True
    chunk_size: int = 4096


@dataclass(frozen=True)
class EncoderSection:
    kind: Literal["vit", "baseline"] = "baseline"
    weights_path: str | None = None
    seed: int = 0
    D: int = 32


@dataclass(frozen=True)
class OutputSection:
    dir: str = "run"
    checkpoint_every: int = 1000


_NESTED = {"field", "encoding", "sampling", "regime"}
_TRAIN_HINTS = get_type_hints(TrainConfig)
TrainSection = dataclasses.make_dataclass(
    "TrainSection",
    [(f.name, Optional[_TRAIN_HINTS[f.name]], dataclasses.field(default=None))
     for f in dataclasses.fields(TrainConfig) if f.name not in _NESTED],
    frozen=True,
)
TrainSection.__doc__ = "Overrides for TrainConfig; ``None`` keeps the regime default."


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSection = dataclasses.field(default_factory=SceneSection)
    field: FieldSection = dataclasses.field(default_factory=FieldSection)
    sampling: SamplingSection = dataclasses.field(default_factory=SamplingSection)
    train: TrainSection = dataclasses.field(default_factory=TrainSection)
    encoder: EncoderSection = dataclasses.field(default_factory=EncoderSection)
    output: OutputSection = dataclasses.field(default_factory=OutputSection)

    def train_config(self) -> TrainConfig:
        """Regime defaults with every explicitly set key applied on top."""
        f, s = self.field, self.sampling
        base = TrainConfig.for_regime(f.regime)
        fc = base.field
        fc = replace(fc, **{k: v for k, v in (("depth", f.depth), ("width", f.width),
                                              ("skip_layers", f.skip_layers),
                                              ("view_dependent", f.view_dependent)) if v is not None})
        enc = base.encoding
        enc = replace(enc, **{k: v for k, v in (("num_freqs_position", f.L_x),
                                               ("num_freqs_direction", f.L_d)) if v is not None})
        samp = replace(base.sampling, perturb=s.perturb, chunk_size=s.chunk_size,
                       **{k: v for k, v in (("n_coarse", s.n_coarse), ("n_fine", s.n_fine)) if v is not None})
        overrides = {f.name: getattr(self.train, f.name) for f in dataclasses.fields(self.train)
                     if getattr(self.train, f.name) is not None}
        return replace(base, field=fc, encoding=enc, sampling=samp, **overrides)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: malformed JSON ({exc})") from None
    return parse_run_config(data, overrides)


def parse_run_config(data: dict, overrides: dict | None = None) -> RunConfig:
    """Validate ``data``; ``overrides`` maps "section.key" to a value."""
    data = json.loads(json.dumps(data))
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not isinstance(data.get(section, {}), dict):
            break
        data.setdefault(section, {})[key] = value
    cfg = from_dict(RunConfig, data)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    try:
        tc = cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None
    if not cfg.scene.path:
        raise ConfigError("scene.path", "required")
    if cfg.scene.near >= cfg.scene.far:
        raise ConfigError("scene.far", "must exceed scene.near")
    if tc.sc_weight > 0 and cfg.encoder.kind == "vit" and not cfg.encoder.weights_path:
        raise ConfigError("encoder.weights_path", "required for kind 'vit' when train.sc_weight > 0")
    if cfg.output.checkpoint_every < 1:
        raise ConfigError("output.checkpoint_every", "must be >= 1")


def _defaults_help() -> str:
    lines = ["run config sections and defaults (train defaults follow field.regime):"]
    for sec in dataclasses.fields(RunConfig):
        lines.append(f"  {sec.name}:")
        for f in dataclasses.fields(sec.default_factory):
            lines.append(f"    {f.name} = {json.dumps(to_dict(f.default))}")
    tc = TrainConfig()
    lines.append("  simplified-regime train values:")
    for f in dataclasses.fields(TrainConfig):
        if f.name not in _NESTED:
            lines.append(f"    {f.name} = {json.dumps(to_dict(getattr(tc, f.name)))}")
    return "\n".join(lines)


def make_encoder(section: EncoderSection):
    if section.kind == "vit":
        if not section.weights_path:
            raise ConfigError("encoder.weights_path", "required for kind 'vit'")
        return load_vit(section.weights_path)
    return BaselineEncoder(section.seed, section.D)


def _save_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8), "RGB").save(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_make_fixture(spec: FixtureSpec, out_dir) -> Path:
    return make_fixture(spec, out_dir)


def _scene_meta(ds) -> dict:
    i = ds.intrinsics
    return {"near": ds.near, "far": ds.far, "background": list(ds.background),
            "height": i.height, "width": i.width, "focal": i.focal}


def cmd_train(cfg: RunConfig) -> int:
    tc = cfg.train_config()
    sc = cfg.scene
    ds = load_scene(sc.path, sc.near, sc.far, sc.background, sc.split, sc.downsample)
    if sc.num_views is not None:
        ds = subsample_views(ds, sc.num_views, sc.view_seed)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", to_dict(cfg))
    _write_json(out / "train_config.json", to_dict(tc))
    encoder = make_encoder(cfg.encoder) if tc.sc_weight > 0 else None
    trainer = Trainer(ds, tc, encoder, out_dir=out)
    trainer.meta = {"scene": _scene_meta(ds)}
    every = cfg.output.checkpoint_every

    with open(out / "log.jsonl", "w") as fh:
        def on_step(tr, record):
            fh.write(json.dumps({**record, "wall_ms": tr.log.wall_ms[-1]}) + "\n")
            if tr.iteration % every == 0:
                tr.save(out / f"ckpt_{tr.iteration:07d}.ckpt")

        try:
            trainer.run(callback=on_step)
            if tc.finetune_iters:
                trainer.finetune(callback=on_step)
        except TrainingDiverged as exc:
            log.error("training diverged: %s (diagnostic checkpoint: %s)", exc, exc.checkpoint_path)
            return EXIT_DIVERGED
    trainer.save(out / "final.ckpt")
    for event in trainer.log.events:
        log.warning("event: %s", event)
    log.info("done: %d iterations, %d consistency evaluations", trainer.iteration, trainer.log.sc_count)
    return 0


def _checkpoint_fields(path):
    ckpt = load_checkpoint(path)
    scene = ckpt.meta.get("scene")
    if scene is None:
        raise ContainerError(f"{path}: checkpoint lacks scene metadata")
    coarse, fine = split_params(ckpt.config, ckpt.params)
    return ckpt, scene, coarse, fine


def render_poses(checkpoint, poses, stride: int = 1, intrinsics: CameraIntrinsics | None = None
                 ) -> list[np.ndarray]:
    ckpt, scene, coarse, fine = _checkpoint_fields(checkpoint)
    intr = intrinsics or CameraIntrinsics(scene["height"], scene["width"], scene["focal"])
    cfg = replace(ckpt.config.sampling, perturb=False, background=tuple(scene["background"]))
    with dc.no_grad():
        return [render_image(coarse, intr, p, stride, scene["near"], scene["far"], cfg, None, fine).data
                for p in poses]


def cmd_render(checkpoint, out_dir, stride: int = 1, scene_path=None, split: str = "test",
               orbit: tuple[int, float, float] | None = None) -> list[Path]:
    """Render either every view of a dataset split or an orbit; one PNG per pose."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = None
    if orbit is not None:
        n, radius, elevation = orbit
        poses = orbit_poses(n, radius, elevation)
        intr = None
    else:
        ds = load_scene(scene_path, split=split)
        poses, intr, gt = ds.poses, ds.intrinsics, ds.images
    images = render_poses(checkpoint, poses, stride, intr)
    paths, report = [], []
    for k, img in enumerate(images):
        path = out / f"frame_{k:04d}.png"
        _save_png(path, img)
        paths.append(path)
        entry = {"file": path.name, "pose": poses[k].to_list()}
        if gt is not None and stride == 1:
            entry["psnr"] = _json_float(psnr(gt[k], img))
        report.append(entry)
    _write_json(out / "frames.json", report)
    return paths


def _json_float(x: float):
    return x if np.isfinite(x) else "inf"


def cmd_eval(checkpoint, scene_path, split: str = "test", out_path=None, gt_vs_gt: bool = False) -> dict:
    """Per-view and mean PSNR/SSIM on a held-out split."""
    ds = load_scene(scene_path, split=split)
    if gt_vs_gt:
        preds = [v.image for v in ds.views]
    else:
        preds = render_poses(checkpoint, ds.poses, 1, ds.intrinsics)
    records = []
    for k, (v, pred) in enumerate(zip(ds.views, preds)):
        records.append({"view": k, "psnr": psnr(v.image, pred), "ssim": ssim(v.image, pred)})
    mean_psnr = float(np.mean([r["psnr"] for r in records]))
    mean_ssim = float(np.mean([r["ssim"] for r in records]))
    result = {"split": split, "num_views": len(records), "views": records,
              "mean": {"psnr": mean_psnr, "ssim": mean_ssim}}
    if out_path is not None:
        serial = dict(result, views=[dict(r, psnr=_json_float(r["psnr"])) for r in records],
                      mean={"psnr": _json_float(mean_psnr), "ssim": mean_ssim})
        _write_json(Path(out_path), serial)
    return result


def cmd_embed_analysis(scene_paths, encoder: EncoderSection, out_dir, num_pairs: int = 200,
                       seed: int = 0, split: str | None = None):
    scenes = [load_scene(p, split=split) for p in scene_paths]
    report = embedding_similarity_report(scenes, make_encoder(encoder), num_pairs,
                                         np.random.default_rng(seed), [Path(p).name for p in scene_paths])
    return report, report.write(out_dir)


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dietfield", description="Few-view radiance field training.",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    fx = sub.add_parser("make-fixture", help="write a procedural dataset")
    fx.add_argument("--config", help="JSON with FixtureSpec fields")
    fx.add_argument("--kind", choices=["textured-cube", "two-sphere"])
    fx.add_argument("--size", type=int, help="image size in pixels (default 64)")
    fx.add_argument("--views", type=int, help="training views (default 8)")
    fx.add_argument("--test-views", type=int, help="held-out views (default 0)")
    fx.add_argument("--seed", type=int)
    fx.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="optimize a field", epilog=_defaults_help(),
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    tr.add_argument("--config", required=True, help="run config JSON")
    tr.add_argument("--seed", type=int, help="overrides train.seed")
    tr.add_argument("--out", help="overrides output.dir")
    tr.add_argument("--iters", type=int, help="overrides train.num_iters")

    rd = sub.add_parser("render", help="render PNGs from a checkpoint",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    rd.add_argument("--checkpoint", required=True)
    rd.add_argument("--out", required=True)
    rd.add_argument("--stride", type=int, default=1)
    src = rd.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", help="dataset directory providing poses")
    src.add_argument("--orbit", type=int, metavar="N_FRAMES", help="orbit around the origin")
    rd.add_argument("--split", default="test")
    rd.add_argument("--radius", type=float, default=4.0)
    rd.add_argument("--elevation", type=float, default=30.0, help="degrees")

    ev = sub.add_parser("eval", help="PSNR/SSIM on held-out views",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ev.add_argument("--checkpoint")
    ev.add_argument("--scene", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", default="metrics.json")
    ev.add_argument("--gt-vs-gt", action="store_true", help="debug: score ground truth against itself")

    em = sub.add_parser("embed-analysis", help="embedding similarity vs. viewpoint",
                        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    em.add_argument("scenes", nargs="+")
    em.add_argument("--config", help="JSON encoder section")
    em.add_argument("--encoder", choices=["vit", "baseline"], default="baseline")
    em.add_argument("--weights")
    em.add_argument("--pairs", type=int, default=200)
    em.add_argument("--seed", type=int, default=0)
    em.add_argument("--split", default=None)
    em.add_argument("--out", required=True)
    return p


def _fixture_spec(args) -> FixtureSpec:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    for key, attr in (("kind", "kind"), ("image_size", "size"), ("num_views", "views"),
                      ("num_test_views", "test_views"), ("seed", "seed")):
        if getattr(args, attr) is not None:
            data[key] = getattr(args, attr)
    return from_dict(FixtureSpec, data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "make-fixture":
            out = cmd_make_fixture(_fixture_spec(args), args.out)
            log.info("wrote %s", out)
            return 0
        if args.command == "train":
            overrides = {k: v for k, v in (("train.seed", args.seed), ("output.dir", args.out),
                                           ("train.num_iters", args.iters)) if v is not None}
            return cmd_train(load_run_config(args.config, overrides))
        if args.command == "render":
            orbit = (args.orbit, args.radius, args.elevation) if args.orbit else None
            paths = cmd_render(args.checkpoint, args.out, args.stride, args.scene, args.split, orbit)
            log.info("wrote %d frames to %s", len(paths), args.out)
            return 0
        if args.command == "eval":
            if not args.gt_vs_gt and not args.checkpoint:
                raise ConfigError("checkpoint", "required unless --gt-vs-gt")
            res = cmd_eval(args.checkpoint, args.scene, args.split, args.out, args.gt_vs_gt)
            log.info("mean PSNR %.3f, SSIM %.4f", res["mean"]["psnr"], res["mean"]["ssim"])
            return 0
        if args.command == "embed-analysis":
            data = json.loads(Path(args.config).read_text()) if args.config else {
                "kind": args.encoder, "weights_path": args.weights}
            section = from_dict(EncoderSection, data, "encoder")
            _, paths = cmd_embed_analysis(args.scenes, section, args.out, args.pairs, args.seed, args.split)
            log.info("wrote %s", ", ".join(map(str, paths)))
            return 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (SceneError, ContainerError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    return 1


if __name__ == "__main__":
    sys.exit(main())
