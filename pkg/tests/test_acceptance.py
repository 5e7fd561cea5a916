"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL/SKIP line in ``RESULTS``; conftest prints the
table at the end of the session. Run this file directly for the same table:

    python3 tests/test_acceptance.py

Criteria 7 and 8 train 7 small fields for 5k iterations each and take
about 50 minutes on one CPU core. Deselect them with ``-m "not slow"``.
Criterion 9 needs real pretrained ViT weights in the VITW container format;
point ``DIETFIELD_VIT_WEIGHTS`` at the file to enable it.
"""

from __future__ import annotations

import os
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from dietfield import diffcore as dc
from dietfield.cli import EncoderSection, cmd_embed_analysis
from dietfield.field import EncodingConfig, FieldConfig, init_params
from dietfield.fixtures import FixtureSpec, make_fixture
from dietfield.losses import mse_rays, sc_cosine, sc_l2
from dietfield.metrics import psnr, ssim
from dietfield.posedist import Hemisphere, look_at, sample_hemisphere_pose
from dietfield.render import (SampleSet, SamplingConfig, composite, deltas_from_t, hierarchical_samples,
                              render_image, render_rays, stratified_samples)
from dietfield.scene import CameraIntrinsics, camera_rays, load_scene, subsample_views
from dietfield.semantic import BaselineEncoder, load_vit, make_test_weights, toy_spec
from dietfield.trainer import TrainConfig, Trainer, load_checkpoint

RESULTS: dict[int, tuple[str, str, str]] = {}

# few-shot experiment settings (criteria 7 and 8)
SEEDS = (0, 1, 2)
FEW_VIEWS, CONTROL_VIEWS, HELD_OUT = 8, 32, 16
ITERS, FINETUNE_ITERS = 5000, 1000
SC_WEIGHT = 0.1


def record(num: int, name: str, passed: bool | None, detail: str) -> None:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    RESULTS[num] = (status, name, detail)


def summary_lines() -> list[str]:
    return [f"[{status}] criterion {num:2d}: {name} ({detail})"
            for num, (status, name, detail) in sorted(RESULTS.items())]


# ---------------------------------------------------------------------------
# 1. gradients

def _camera_rays(n):
    intr = CameraIntrinsics(8, 8, 10.0)
    return camera_rays(intr, look_at((0.5, -3.5, 1.5), (0, 0, 0)))[:n], intr


def test_c01_gradient_correctness(tmp_path):
    start = time.time()
    field = init_params(FieldConfig(depth=2, width=16, skip_layers=(), view_dependent=False),
                        EncodingConfig(3, 2), 0)
    rays, intr = _camera_rays(4)
    gt = np.random.default_rng(2).random((4, 3)).astype(np.float32)
    cfg = SamplingConfig(16, 0, perturb=False)

    def mse_loss(t):
        return mse_rays(render_rays(field.bind(t), rays, 2, 6, cfg).rgb, gt)

    report_a = dc.finite_difference_check(dc.Graph(mse_loss, field.tensors), eps=1e-5, coords_per_param=None)

    make_test_weights(toy_spec(), 0, tmp_path / "toy.vitw")
    vit = load_vit(tmp_path / "toy.vitw")
    target = vit.encode(np.random.default_rng(3).random((8, 8, 3))).data
    small = init_params(FieldConfig(depth=2, width=16, skip_layers=(), view_dependent=False),
                        EncodingConfig(3, 2), 1)
    pose = look_at((0.5, -3.5, 1.5), (0, 0, 0))

    def sc_loss(t):
        img = render_image(small.bind(t), intr, pose, 1, 2, 6, SamplingConfig(8, 0, perturb=False))
        return sc_cosine(target, vit.encode(img), 1.0)

    report_b = dc.finite_difference_check(dc.Graph(sc_loss, small.tensors), eps=1e-5, coords_per_param=6)
    elapsed = time.time() - start
    ok = report_a.passed and report_b.passed and elapsed < 120
    record(1, "gradient correctness", ok,
           f"mse max rel {report_a.max_rel_err:.2e}, sc+vit max rel {report_b.max_rel_err:.2e}, {elapsed:.0f}s")
    assert report_a.passed, report_a
    assert report_b.passed, report_b
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. quadrature

def _quadrature_error(n, sigma=1.0, c=(0.2, 0.5, 0.9), near=2.0, far=6.0):
    t = stratified_samples(near, far, n).t
    s = SampleSet(t, deltas_from_t(t, far - t[0, -1]))
    rgb = np.broadcast_to(np.float32(c), (1, n, 3))
    out = composite(rgb, np.full((1, n), sigma, np.float32), s, background=None)
    exact = np.array(c) * (1 - np.exp(-sigma * (far - near)))
    return float(np.abs(out.rgb.data[0] - exact).max())


def test_c02_quadrature_matches_closed_form():
    errors = {n: _quadrature_error(n) for n in (16, 32, 64, 128, 256)}
    values = list(errors.values())
    monotone = all(a > b for a, b in zip(values, values[1:]))
    ok = errors[64] < 1e-3 and monotone
    record(2, "quadrature vs closed form", ok,
           f"err@64 {errors[64]:.2e}, " + " > ".join(f"{e:.1e}" for e in values))
    assert errors[64] < 1e-3
    assert monotone


# ---------------------------------------------------------------------------
# 3. loss identity

def test_c03_l2_cosine_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a, b = rng.normal(size=(2, 32))
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        lam = rng.uniform(0.01, 2.0)
        worst = max(worst, abs(float(sc_l2(a, b, lam).data) - lam * (1 - float(a @ b))))
    record(3, "sc_l2 equals lambda*(1-cos)", worst < 1e-6, f"max abs diff {worst:.1e}")
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# 4. hierarchical sampler

def test_c04_hierarchical_sampler_distribution():
    rng = np.random.default_rng(0)
    t = stratified_samples(2.0, 6.0, 8).t
    merged = hierarchical_samples(t, np.ones((1, 8)), 10_000, rng, near=2.0, far=6.0)
    counts, _ = np.histogram(merged.t[0], bins=8, range=(2.0, 6.0))
    p_value = stats.chisquare(counts - 1).pvalue

    t4 = stratified_samples(2.0, 6.0, 4).t
    point = hierarchical_samples(t4, np.array([[0.0, 0.0, 1.0, 0.0]]), 10_000, rng, near=2.0, far=6.0)
    fine = np.setdiff1d(point.t[0], t4[0])
    heavy = float(np.mean((fine >= 4.0) & (fine <= 5.0)))
    ok = p_value > 0.01 and heavy >= 0.99
    record(4, "hierarchical sampler distribution", ok, f"chi2 p {p_value:.3f}, heavy-bin share {heavy:.4f}")
    assert p_value > 0.01
    assert heavy >= 0.99


# ---------------------------------------------------------------------------
# 5. pose distribution

def test_c05_hemisphere_statistics():
    rng = np.random.default_rng(0)
    dist = Hemisphere(radius_min=3.5, radius_max=4.5)
    origins = np.stack([sample_hemisphere_pose(dist, rng).origin for _ in range(100_000)])
    radii = np.linalg.norm(origins, axis=1)
    unit = origins / radii[:, None]
    mean_z = float(unit[:, 2].mean())
    azimuth = np.arctan2(unit[:, 1], unit[:, 0])
    counts, _ = np.histogram(azimuth, bins=36, range=(-np.pi, np.pi))
    p_value = stats.chisquare(counts).pvalue
    in_bounds = bool(np.all((radii >= 3.5 - 1e-9) & (radii <= 4.5 + 1e-9)))
    ok = abs(mean_z - 0.5) <= 0.01 and p_value > 0.01 and in_bounds
    record(5, "hemisphere pose statistics", ok,
           f"E[z] {mean_z:.4f}, azimuth chi2 p {p_value:.3f}, radii in bounds {in_bounds}")
    assert abs(mean_z - 0.5) <= 0.01
    assert p_value > 0.01
    assert in_bounds


# ---------------------------------------------------------------------------
# 6. cadence, determinism, resume

def test_c06_cadence_and_determinism(tmp_path):
    root = make_fixture(FixtureSpec(num_views=4, image_size=16), tmp_path / "scene")
    ds = load_scene(root)
    cfg = TrainConfig(num_iters=100, sc_interval=16, sc_weight=0.1, ray_batch_size=32, lr_init=1e-3,
                      lr_decay_steps=5000, seed=5, field=FieldConfig(depth=2, width=16, skip_layers=(),
                                                                      view_dependent=False),
                      encoding=EncodingConfig(4, 2), sampling=SamplingConfig(16, 0))

    def run(n=None):
        tr = Trainer(ds, cfg, BaselineEncoder(0, 16))
        tr.run(n)
        return tr

    a, b = run(), run()
    cadence = a.log.sc_count == 100 // 16
    identical = a.log.records == b.log.records and all(
        a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    same_file = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    half = run(40)
    half.save(tmp_path / "half.ckpt")
    resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "half.ckpt"), ds, BaselineEncoder(0, 16))
    resumed.run()
    transparent = half.log.records + resumed.log.records == a.log.records and all(
        a.params[k].tobytes() == resumed.params[k].tobytes() for k in a.params)
    ok = cadence and identical and same_file and transparent
    record(6, "SC cadence and determinism", ok,
           f"sc evals {a.log.sc_count}/6, identical runs {identical and same_file}, resume bit-exact {transparent}")
    assert cadence
    assert identical and same_file
    assert transparent


# ---------------------------------------------------------------------------
# 7 and 8. few-shot benefit and fine-tuning trend

def desk_config(seed: int, sc_weight: float) -> TrainConfig:
    return TrainConfig(num_iters=ITERS, ray_batch_size=256, sc_interval=10, sc_weight=sc_weight,
                       sc_render_stride=2, lr_init=1e-3, lr_decay_steps=5000, seed=seed,
                       field=FieldConfig(depth=4, width=64, skip_layers=(2,), view_dependent=False),
                       encoding=EncodingConfig(6, 2), sampling=SamplingConfig(32, 0))


def held_out_psnr(trainer: Trainer, test) -> float:
    coarse, _ = trainer.fields()
    cfg = replace(trainer.config.sampling, perturb=False)
    with dc.no_grad():
        return float(np.mean([psnr(v.image, render_image(coarse, test.intrinsics, v.pose, 1, test.near,
                                                         test.far, cfg).data) for v in test.views]))


@pytest.fixture(scope="module")
def few_shot(tmp_path_factory):
    root = make_fixture(FixtureSpec(num_views=CONTROL_VIEWS, num_test_views=HELD_OUT, image_size=64),
                        tmp_path_factory.mktemp("few_shot"))
    train, test = load_scene(root, split="train"), load_scene(root, split="test")
    out = {"test": test, "baseline": {}, "diet": {}, "trainers": {}}
    for seed in SEEDS:
        views = subsample_views(train, FEW_VIEWS, seed)
        for key, lam in (("baseline", 0.0), ("diet", SC_WEIGHT)):
            tr = Trainer(views, desk_config(seed, lam), BaselineEncoder(0, 32) if lam > 0 else None)
            tr.run()
            out[key][seed] = held_out_psnr(tr, test)
            out["trainers"][(key, seed)] = tr
    control = Trainer(train, desk_config(0, 0.0))
    control.run()
    out["control"] = held_out_psnr(control, test)
    return out


@pytest.mark.slow
def test_c07_few_shot_benefit(few_shot):
    diet = np.mean(list(few_shot["diet"].values()))
    base = np.mean(list(few_shot["baseline"].values()))
    control = few_shot["control"]
    ok = diet >= base and base < control
    per_seed = ", ".join(f"s{s}: {few_shot['baseline'][s]:.2f}->{few_shot['diet'][s]:.2f}" for s in SEEDS)
    record(7, "few-shot benefit of SC", ok,
           f"mean PSNR lambda=0 {base:.2f}, lambda={SC_WEIGHT} {diet:.2f}, "
           f"{CONTROL_VIEWS}-view control {control:.2f}; {per_seed}")
    assert diet >= base
    assert base < control


@pytest.mark.slow
def test_c08_finetune_does_not_hurt(few_shot):
    before, after = [], []
    for seed in SEEDS:
        tr = few_shot["trainers"][("diet", seed)]
        before.append(few_shot["diet"][seed])
        tr.finetune(FINETUNE_ITERS)
        after.append(held_out_psnr(tr, few_shot["test"]))
    ok = np.mean(after) >= np.mean(before)
    record(8, "MSE fine-tuning trend", ok,
           f"mean PSNR {np.mean(before):.2f} -> {np.mean(after):.2f} after +{FINETUNE_ITERS} iters")
    assert np.mean(after) >= np.mean(before)


# ---------------------------------------------------------------------------
# 9. embedding analysis

def test_c09_embedding_analysis(tmp_path):
    scenes = [make_fixture(FixtureSpec(kind=kind, num_views=12, image_size=64, seed=i), tmp_path / kind)
              for i, kind in enumerate(("textured-cube", "two-sphere"))]
    weights = os.environ.get("DIETFIELD_VIT_WEIGHTS")
    if not weights:
        # structural run with seeded toy weights: the pipeline must produce both kinds of group
        toy = tmp_path / "toy.vitw"
        make_test_weights(toy_spec(), 0, toy)
        report, paths = cmd_embed_analysis(scenes, EncoderSection(kind="vit", weights_path=str(toy)),
                                           tmp_path / "out", num_pairs=50)
        kinds = {g.same_scene for g in report.groups}
        assert kinds == {True, False} and all(p.exists() for p in paths)
        record(9, "same-scene vs cross-scene similarity", None,
               "no pretrained weights (set DIETFIELD_VIT_WEIGHTS); pipeline validated with toy weights")
        pytest.skip("real pretrained ViT weights not supplied")
    report, _ = cmd_embed_analysis(scenes, EncoderSection(kind="vit", weights_path=weights),
                                   tmp_path / "out", num_pairs=200)
    same = np.mean([g.mean_similarity for g in report.groups if g.same_scene])
    cross = np.mean([g.mean_similarity for g in report.groups if not g.same_scene])
    record(9, "same-scene vs cross-scene similarity", same > cross, f"same {same:.4f}, cross {cross:.4f}")
    assert same > cross


# ---------------------------------------------------------------------------
# 10. metric oracles

def test_c10_metric_oracles():
    a = np.array([[[0.0] * 3, [1.0] * 3], [[0.5] * 3, [0.25] * 3]])
    b = a.copy()
    b[0, 0] = 0.1
    mse = 0.01 / 4
    psnr_ok = abs(psnr(a, b) - 10 * np.log10(1 / mse)) < 1e-4 and psnr(a, a) == float("inf")
    gray = np.full((16, 16, 3), 0.4)
    ssim_identical = abs(ssim(gray, gray) - 1.0) < 1e-6
    # constant images: SSIM reduces to the luminance term
    x, y = 0.4, 0.6
    c1 = (0.01 * 1.0) ** 2
    expected = (2 * x * y + c1) / (x * x + y * y + c1)
    ssim_const = abs(ssim(gray, np.full((16, 16, 3), 0.6)) - expected) < 1e-6
    ok = psnr_ok and ssim_identical and ssim_const
    record(10, "metric oracles", ok,
           f"psnr {psnr(a, b):.4f} vs {10 * np.log10(1 / mse):.4f}, "
           f"ssim const {ssim(gray, np.full((16, 16, 3), 0.6)):.6f} vs {expected:.6f}")
    assert psnr_ok
    assert ssim_identical and ssim_const


if __name__ == "__main__":
    import sys

    # the summary table is printed by the terminal-summary hook in conftest
    raise SystemExit(pytest.main([__file__, "-q", *sys.argv[1:]]))
