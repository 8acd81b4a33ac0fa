"""Acceptance criteria 1-10, each checked at its stated tolerance.

Trained networks are cached under ``.acceptance_cache`` at the repository root
(override with PHOTOXFORM_ACCEPTANCE_CACHE), keyed by a hash of the training
configuration.  Without a cache the trend criterion trains all nine budget and
seed combinations plus their ablations, which takes well over an hour on one core.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from photoxform import features as ft
from photoxform.lightstage import LayoutConfig, build_layout, encode_view, turntable_angles
from photoxform.matching import azimuth_variation, baseline_raw_ssd, build_synthetic_scene, distance_stats, match_nn
from photoxform.model import FeatureNet, ModelConfig, forward_insensitive, load_checkpoint, save_checkpoint
from photoxform.objective import loss_main, pair_loss
from photoxform.patterns import capture_measurements, export_patterns, read_patterns_csv, split_pattern, write_patterns_csv
from photoxform.pointlight import default_rig, light_mask, render_pointlight_batch
from photoxform.shading import (SamplingConfig, pairs_to_records, read_dataset, render_pairs,
                                sample_training_points, write_dataset)
from photoxform.training import (TrainConfig, budget_config, cached_run, eval_trend, model_gradcheck,
                                 sensitive_only_config, trend_means)

CACHE = Path(os.environ.get("PHOTOXFORM_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))
BUDGETS = (6, 8, 10)
SEEDS = (0, 1, 2)
SCENE_SEED = 1000  # disjoint from every training stream
VIEWS = turntable_angles(24)[[0, 1]]
POINTLIGHT_CONFIG = TrainConfig(mode="pointlight", active_lights=4, iters_pre=2000, iters_joint=6000)
SPHERE = dict(rho_d=0.5, rho_s=1.0, alpha_x=0.2, alpha_y=0.2)


@pytest.fixture(scope="module")
def layout():
    return build_layout(LayoutConfig())


@pytest.fixture(scope="module")
def trend_rows():
    return eval_trend(TrainConfig(), BUDGETS, SEEDS, cache_dir=CACHE)


@pytest.fixture(scope="module")
def trained():
    net, _ = cached_run("full", budget_config(TrainConfig(), 8, 0), CACHE)
    return net


@pytest.fixture(scope="module")
def cloud(layout, trained):
    def capture(sigma):
        return build_synthetic_scene("cloud", 500, VIEWS, np.random.default_rng(SCENE_SEED), layout=layout,
                                     patterns=export_patterns(trained), noise_sigma=sigma,
                                     noise_rng=np.random.default_rng(SCENE_SEED + 1))
    return {0.0: capture(0.0), 0.05: capture(0.05)}


def scene_metrics(net, cap):
    truth = cap.correspondences(0, 1)
    fa, fb = ft.extract(cap.stacks[0], net), ft.extract(cap.stacks[1], net)
    _, feat = match_nn(fa, fb, truth)
    raw = baseline_raw_ssd(cap.stacks[0], cap.stacks[1], truth)
    return feat, raw, distance_stats(fa, fb, truth), (fa, fb)


# -- criterion 1 ----------------------------------------------------------------

def test_criterion_1_gradient_correctness(acceptance):
    start = time.perf_counter()
    single = model_gradcheck(seed=0, k=4, precision="single")
    double = model_gradcheck(seed=0, k=4, precision="double")
    elapsed = time.perf_counter() - start
    groups = set(single.errors)
    ok = (single.max_error < 1e-4 and double.max_error < 1e-7 and elapsed < 60
          and {"sens.pattern", "insens.pattern", "combine.W"} <= groups and set(double.errors) == groups)
    assert acceptance(1, ok, f"single {single.max_error:.2e} < 1e-4, double {double.max_error:.2e} < 1e-7, "
                             f"{len(groups)} groups, {elapsed:.1f} s")


# -- criterion 2 ----------------------------------------------------------------

def test_criterion_2_measurement_linearity(acceptance, layout):
    rng = np.random.default_rng(2)
    trials, chunk, M = 10_000, 1000, 8
    worst_lin = worst_split = 0.0
    for _ in range(trials // chunk):
        pts = sample_training_points(rng, SamplingConfig(), chunk, layout.camera)
        c1, c2 = render_pairs(layout, pts)
        P = rng.uniform(-1, 1, size=(chunk, M, layout.count))
        a, b = rng.uniform(-2, 2, size=(2, chunk, 1))
        m1 = np.einsum("nml,nl->nm", P, c1)
        m2 = np.einsum("nml,nl->nm", P, c2)
        lhs = np.einsum("nml,nl->nm", P, a * c1 + b * c2)
        scale = np.einsum("nml,nl->nm", np.abs(P), np.abs(a) * c1 + np.abs(b) * c2)
        worst_lin = max(worst_lin, float(np.max(np.abs(lhs - (a * m1 + b * m2)) / scale)))
        for i in range(0, chunk, 50):  # physical split path on a subsample of each chunk
            pairs = [split_pattern(row) for row in P[i]]
            split = capture_measurements(c1[i:i + 1], pairs)[0]
            direct = P[i] @ c1[i]
            worst_split = max(worst_split, float(np.max(np.abs(split - direct) / (np.abs(P[i]) @ c1[i]))))
    ok = worst_lin < 1e-6 and worst_split < 1e-6
    assert acceptance(2, ok, f"{trials} trials, linearity error {worst_lin:.1e}, split-capture error "
                             f"{worst_split:.1e} (limit 1e-6)")


# -- criterion 3 ----------------------------------------------------------------

def insensitive_scale_error(net, x, v):
    base = forward_insensitive(x, v, net)
    return max(float(np.max(np.abs(forward_insensitive(x * s, v, net) - base))) for s in np.logspace(-3, 3, 13))


def test_criterion_3_insensitive_scale_invariance(acceptance, layout, trained):
    rng = np.random.default_rng(3)
    pts = sample_training_points(rng, SamplingConfig(), 64, layout.camera)
    x, _ = render_pairs(layout, pts)
    v = encode_view(pts.theta1)
    errors = [insensitive_scale_error(FeatureNet(ModelConfig(), rng=np.random.default_rng(s)), x, v)
              for s in range(3)]
    errors.append(insensitive_scale_error(trained, x, v))
    ok = max(errors) < 1e-5
    assert acceptance(3, ok, f"max deviation over s in [1e-3, 1e3]: untrained {max(errors[:3]):.1e}, "
                             f"trained {errors[3]:.1e} (limit 1e-5)")


# -- criterion 4 ----------------------------------------------------------------

def test_criterion_4_loss_unit_values(acceptance):
    k1, _ = loss_main(np.array([[0.0]]))
    k2, _, _ = pair_loss(np.eye(2), np.eye(2))
    oracle = -2 * math.log(1 / (1 + math.exp(-math.sqrt(2))))
    ok = k1 == 0.0 and abs(k2 - oracle) < 1e-6
    assert acceptance(4, ok, f"k=1 loss {k1 + 0.0}, k=2 loss {k2:.7f} vs {oracle:.7f}")


# -- criterion 5 ----------------------------------------------------------------

def test_criterion_5_budget_trends(acceptance, trend_rows):
    means = trend_means(trend_rows)
    values = [means[b] for b in BUDGETS]
    trend_ok = all(later <= earlier for earlier, later in zip(values, values[1:]))
    beats = [r["l_main"] < r["sens_only_l_main"] for r in trend_rows]
    runtimes = []
    for budget in BUDGETS:
        for seed in SEEDS:
            runtimes.append(cached_run("full", budget_config(TrainConfig(), budget, seed), CACHE)[1]["wall_time"])
            runtimes.append(cached_run("sens-only", sensitive_only_config(TrainConfig(), budget, seed), CACHE)[1]["wall_time"])
    per_seed = "; ".join(f"b{r['budget']}s{r['seed']} {r['l_main']:.1f}/{r['sens_only_l_main']:.1f}"
                         for r in trend_rows)
    ok = trend_ok and all(beats) and max(runtimes) <= 1800
    assert acceptance(5, ok, f"(a) mean smoothed L_main over seeds {', '.join(f'{b}: {m:.2f}' for b, m in means.items())} "
                             f"non-increasing={trend_ok}; (b) combined < sensitive-only in {sum(beats)}/{len(beats)} "
                             f"[{per_seed}]; slowest run {max(runtimes):.0f} s")


# -- criterion 6 ----------------------------------------------------------------

def test_criterion_6_feature_quality(acceptance, cloud, trained):
    feat, raw, stats, _ = scene_metrics(trained, cloud[0.0])
    ok = (feat.mutual_accuracy > raw.mutual_accuracy and feat.top1_accuracy > raw.top1_accuracy
          and stats["intra"] < stats["inter"] and stats["ratio"] < 0.5)
    assert acceptance(6, ok, f"{feat.n_truth} co-visible points: mutual-NN accuracy {feat.mutual_accuracy:.3f} vs raw SSD "
                             f"{raw.mutual_accuracy:.3f}, top-1 {feat.top1_accuracy:.3f} vs {raw.top1_accuracy:.3f}; "
                             f"intra/inter {stats['intra']:.3f}/{stats['inter']:.3f} = {stats['ratio']:.3f} < 0.5")


# -- criterion 7 ----------------------------------------------------------------

def test_criterion_7_noise_robustness(acceptance, cloud, trained):
    clean, _, _, _ = scene_metrics(trained, cloud[0.0])
    noisy, raw_noisy, _, _ = scene_metrics(trained, cloud[0.05])
    chance = 1.0 / clean.n_candidates
    drop = clean.top1_accuracy - noisy.top1_accuracy
    ok = drop < clean.top1_accuracy - chance and noisy.top1_accuracy > raw_noisy.top1_accuracy
    assert acceptance(7, ok, f"top-1 {clean.top1_accuracy:.3f} clean, {noisy.top1_accuracy:.3f} at 5% noise "
                             f"(drop {drop:.3f} < gap to chance {clean.top1_accuracy - chance:.3f}); "
                             f"raw SSD at 5% noise {raw_noisy.top1_accuracy:.3f}")


# -- criterion 8 ----------------------------------------------------------------

def test_criterion_8_azimuth_variation(acceptance, layout, trend_rows):
    results = []
    for seed in SEEDS:
        combined, _ = cached_run("full", budget_config(TrainConfig(), 8, seed), CACHE)
        sens, _ = cached_run("sens-only", sensitive_only_config(TrainConfig(), 8, seed), CACHE)
        values = []
        for net in (combined, sens):
            cap = build_synthetic_scene("sphere", 600, VIEWS, np.random.default_rng(SCENE_SEED), layout=layout,
                                        patterns=export_patterns(net), homogeneous=SPHERE)
            values.append(azimuth_variation(ft.extract(cap.stacks[0], net), cap))
        results.append(values)
    ok = all(c > s for c, s in results)
    assert acceptance(8, ok, "within-ring / overall feature distance, combined vs sensitive-only: "
                             + ", ".join(f"seed {s}: {c:.3f} vs {x:.3f}" for s, (c, x) in zip(SEEDS, results)))


# -- criterion 9 ----------------------------------------------------------------

def test_criterion_9_round_trips(acceptance, tmp_path, layout, trained, cloud):
    checks = {}
    save_checkpoint(tmp_path / "a.pftc", trained, LayoutConfig())
    again, _ = load_checkpoint(tmp_path / "a.pftc")
    save_checkpoint(tmp_path / "b.pftc", again, LayoutConfig())
    checks["checkpoint"] = (tmp_path / "a.pftc").read_bytes() == (tmp_path / "b.pftc").read_bytes()

    write_patterns_csv(tmp_path / "a.csv", export_patterns(trained))
    write_patterns_csv(tmp_path / "b.csv", read_patterns_csv(tmp_path / "a.csv"))
    checks["patterns"] = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    pts = sample_training_points(np.random.default_rng(9), SamplingConfig(), 20, layout.camera)
    write_dataset(tmp_path / "a.ltx1", pairs_to_records(layout, pts, *render_pairs(layout, pts)), layout)
    write_dataset(tmp_path / "b.ltx1", *read_dataset(tmp_path / "a.ltx1"))
    checks["dataset"] = (tmp_path / "a.ltx1").read_bytes() == (tmp_path / "b.ltx1").read_bytes()

    _, _, _, (fa, fb) = scene_metrics(trained, cloud[0.0])
    ft.write_feature_map(tmp_path / "a.fmap", fa)
    ft.write_feature_map(tmp_path / "b.fmap", ft.read_feature_map(tmp_path / "a.fmap"))
    checks["feature map"] = (tmp_path / "a.fmap").read_bytes() == (tmp_path / "b.fmap").read_bytes()

    pca = ft.fit_pca([fa, fb], 4)
    ortho = float(np.max(np.abs(pca.components @ pca.components.T - np.eye(4))))
    X = fa.valid_features().astype(np.float64)[:300]
    full = ft.project(X, ft.fit_pca([fa, fb], fa.dim, allow_deficient=True))
    dist = float(np.max(np.abs(np.linalg.norm(X[:, None] - X[None], axis=-1)
                               - np.linalg.norm(full[:, None] - full[None], axis=-1))))
    ok = all(checks.values()) and ortho < 1e-5 and dist < 1e-5
    assert acceptance(9, ok, ", ".join(f"{k} {'bit-exact' if v else 'DIFFERS'}" for k, v in checks.items())
                      + f"; PCA orthonormality {ortho:.1e}, full-rank distance change {dist:.1e}")


# -- criterion 10 ---------------------------------------------------------------

def test_criterion_10_pointlight_mode(acceptance):
    parts = {}
    single = model_gradcheck(seed=0, k=4, precision="single", mode="pointlight")
    double = model_gradcheck(seed=0, k=4, precision="double", mode="pointlight")
    parts["gradients"] = single.max_error < 1e-4 and double.max_error < 1e-7

    rig = default_rig()
    rng = np.random.default_rng(10)
    pts = sample_training_points(rng, SamplingConfig(), 2000, rig.camera)
    geo = (pts.positions, pts.frames, pts.theta1)
    x1 = render_pointlight_batch(rig, *geo, pts.rho_d, pts.rho_s, pts.alpha_x, pts.alpha_y)
    x2 = render_pointlight_batch(rig, *geo, pts.rho_d[::-1], pts.rho_s[::-1], pts.alpha_x, pts.alpha_y)
    mixed = render_pointlight_batch(rig, *geo, 0.3 * pts.rho_d + 1.7 * pts.rho_d[::-1],
                                    0.3 * pts.rho_s + 1.7 * pts.rho_s[::-1], pts.alpha_x, pts.alpha_y)
    parts["linearity"] = float(np.max(np.abs(mixed - (0.3 * x1 + 1.7 * x2)) / (0.3 * x1 + 1.7 * x2 + 1e-300))) < 1e-6

    net = FeatureNet(ModelConfig(mode="pointlight", inputs=96), rng=np.random.default_rng(0))
    v = encode_view(pts.theta1[:64])
    parts["scale invariance"] = insensitive_scale_error(net, x1[:64], v) < 1e-5

    feats = net.forward(x1[:1], v[:1]).astype(np.float64)
    k1, _, _ = pair_loss(feats, feats)
    k2, _, _ = pair_loss(np.eye(2), np.eye(2))
    parts["loss values"] = k1 == 0.0 and abs(k2 + 2 * math.log(1 / (1 + math.exp(-math.sqrt(2))))) < 1e-6

    trained, _ = cached_run("full", POINTLIGHT_CONFIG, CACHE)
    mask = light_mask(rig, 4)
    cap = build_synthetic_scene("cloud", 100, VIEWS, np.random.default_rng(SCENE_SEED), rig=rig, light_mask=mask)
    truth = cap.correspondences(0, 1)
    _, m = match_nn(ft.extract(cap.stacks[0], trained), ft.extract(cap.stacks[1], trained), truth)
    chance = 1.0 / m.n_candidates
    parts["4-light matching"] = m.top1_accuracy > chance
    ok = all(parts.values())
    assert acceptance(10, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in parts.items())
                      + f"; gradcheck {single.max_error:.1e}/{double.max_error:.1e}; 4-light top-1 "
                        f"{m.top1_accuracy:.3f} vs chance {chance:.3f} on {m.n_truth} points")
