"""Synthetic multi-view scenes with known correspondences, and feature-matching metrics.

Stands in for a dense multi-view stereo backend: each scene point is
projected into every view where it faces the camera, and matching is scored
per point against the known pixel pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .features import FeatureMap, MeasurementStack
from .lightstage import LightstageLayout, turntable_transform
from .patterns import PhysicalPatternPair, capture_measurements
from .pointlight import PointLightRig, render_pointlight_batch
from .shading import SamplingConfig, frame_from_normal, random_frames, render_batch

RATIO_THRESHOLD = 0.8


@dataclass(eq=False)
class Scene:
    """Object-space points with per-point reflectance, seen at a list of turntable angles."""

    positions: np.ndarray  # (n, 3)
    frames: np.ndarray  # (n, 3, 3)
    rho_d: np.ndarray  # (n, C)
    rho_s: np.ndarray  # (n,)
    alpha_x: np.ndarray
    alpha_y: np.ndarray
    thetas: np.ndarray  # (V,)
    image_size: tuple[int, int] = (128, 128)

    @property
    def n_points(self) -> int:
        return len(self.positions)

    @property
    def channels(self) -> int:
        return self.rho_d.shape[1]


@dataclass
class CorrespondenceSet:
    point_ids: np.ndarray  # (n,)
    pix_a: np.ndarray  # (n, 2) row, col
    pix_b: np.ndarray  # (n, 2)
    correct: np.ndarray | None = None  # ground-truth flag per pair, when known

    def __len__(self):
        return len(self.point_ids)

    def pairs(self) -> set[tuple[tuple[int, int], tuple[int, int]]]:
        return {(tuple(a), tuple(b)) for a, b in zip(self.pix_a.tolist(), self.pix_b.tolist())}


@dataclass
class MatchMetrics:
    top1_accuracy: float
    mean_rank: float
    precision_at_ratio: float
    mutual_accuracy: float = 0.0
    n_truth: int = 0
    n_candidates: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"top1_accuracy": self.top1_accuracy, "mean_rank": self.mean_rank,
                "precision_at_ratio": self.precision_at_ratio,
                "mutual_accuracy": self.mutual_accuracy, "n_truth": self.n_truth,
                "n_candidates": self.n_candidates, **self.extra}


# -- scenes -------------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5**0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def make_scene(shape: str, n_points: int, thetas, rng: np.random.Generator,
               sampling: SamplingConfig | None = None, channels: int = 1,
               homogeneous: dict | None = None, radius: float = 0.08,
               image_size: tuple[int, int] = (128, 128)) -> Scene:
    """Sample scene geometry and reflectance.

    ``homogeneous`` fixes one BRDF for every point (keys rho_d, rho_s,
    alpha_x, alpha_y); otherwise each point draws its own from ``sampling``.
    """
    if n_points < 2:
        raise ConfigurationError("a scene needs at least 2 points")
    thetas = np.asarray(thetas, dtype=np.float64)
    if len(thetas) < 2:
        raise ConfigurationError("a scene needs at least 2 views")
    sampling = sampling or SamplingConfig()
    if shape == "sphere":
        normals = fibonacci_sphere(n_points)
        positions = radius * normals
        frames = frame_from_normal(normals, np.cross([0.0, 0.0, 1.0], normals) + [1e-9, 0, 0])
    elif shape in ("random-point-cloud", "cloud"):
        h = sampling.half_extent
        positions = rng.uniform(-h, h, size=(n_points, 3))
        frames = random_frames(rng, n_points)
    else:
        raise ConfigurationError(f"unknown scene shape {shape!r}")

    if homogeneous is not None:
        rho_d = np.full((n_points, channels), homogeneous["rho_d"], dtype=np.float64)
        rho_s = np.full(n_points, homogeneous["rho_s"])
        ax = np.full(n_points, homogeneous["alpha_x"])
        ay = np.full(n_points, homogeneous["alpha_y"])
    else:
        lo, hi = np.log(sampling.roughness_range)
        rho_d = rng.uniform(*sampling.rho_d_range, size=(n_points, channels))
        rho_s = rng.uniform(*sampling.rho_s_range, size=n_points)
        ax = np.exp(rng.uniform(lo, hi, size=n_points))
        ay = np.exp(rng.uniform(lo, hi, size=n_points))
    return Scene(positions, frames, rho_d, rho_s, ax, ay, thetas, tuple(image_size))


def project_points(scene: Scene, camera) -> tuple[np.ndarray, np.ndarray]:
    """Pixel ``(V, n, 2)`` and visibility ``(V, n)`` of every point in every view.

    Perspective camera on the -y face looking along +y; a point is visible
    when it faces the camera and wins the depth test for its pixel.
    """
    H, W = scene.image_size
    V, n = len(scene.thetas), scene.n_points
    camera = np.asarray(camera, dtype=np.float64)
    pix = np.zeros((V, n, 2), dtype=np.int64)
    vis = np.zeros((V, n), dtype=bool)
    focal = 0.5 * min(H, W) / 0.8
    for v, theta in enumerate(scene.thetas):
        x, frame = turntable_transform(scene.positions, scene.frames, theta)
        rel = x - camera
        depth = rel[:, 1]
        facing = np.einsum("nk,nk->n", -rel, frame[:, :, 2]) > 0
        col = np.floor(W / 2 + focal * rel[:, 0] / depth).astype(np.int64)
        row = np.floor(H / 2 - focal * rel[:, 2] / depth).astype(np.int64)
        inside = (depth > 0) & (row >= 0) & (row < H) & (col >= 0) & (col < W)
        cand = np.flatnonzero(facing & inside)
        # nearest point wins each pixel
        order = cand[np.lexsort((depth[cand], row[cand] * W + col[cand]))]
        keys = row[order] * W + col[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = keys[1:] != keys[:-1]
        winners = order[first]
        vis[v, winners] = True
        pix[v, :, 0] = row
        pix[v, :, 1] = col
    return pix, vis


def scene_responses(scene: Scene, layout: LightstageLayout | None = None,
                    rig: PointLightRig | None = None, light_mask=None) -> np.ndarray:
    """Per-view raw responses ``(V, n, inputs, C)``: lumitexels, or point-light vectors."""
    out = []
    for theta in scene.thetas:
        thetas = np.full(scene.n_points, theta)
        chans = []
        for c in range(scene.channels):
            args = (scene.positions, scene.frames, thetas, scene.rho_d[:, c], scene.rho_s,
                    scene.alpha_x, scene.alpha_y)
            if rig is not None:
                chans.append(render_pointlight_batch(rig, *args, mask=light_mask))
            else:
                chans.append(render_batch(layout, *args))
        out.append(np.stack(chans, axis=-1))
    return np.stack(out)


@dataclass(eq=False)
class SceneCapture:
    scene: Scene
    stacks: list[MeasurementStack]
    truth: dict[tuple[int, int], CorrespondenceSet]
    pixels: np.ndarray  # (V, n, 2)
    visible: np.ndarray  # (V, n)

    def correspondences(self, a: int = 0, b: int = 1) -> CorrespondenceSet:
        return self.truth[(a, b)]

    def truth_json(self) -> dict:
        points = []
        for i in range(self.scene.n_points):
            pixels = [self.pixels[v, i].tolist() if self.visible[v, i] else None
                      for v in range(len(self.scene.thetas))]
            points.append({"id": i, "pixels": pixels})
        return {"views": [float(t) for t in self.scene.thetas],
                "image_size": list(self.scene.image_size), "points": points}


def capture_scene(scene: Scene, measure_fn, camera) -> SceneCapture:
    """Project the scene and fill one measurement stack per view.

    ``measure_fn(view_index)`` returns ``(n, M, C)`` measurements of every point.
    """
    pix, vis = project_points(scene, camera)
    H, W = scene.image_size
    stacks = []
    for v, theta in enumerate(scene.thetas):
        meas = np.asarray(measure_fn(v))
        data = np.zeros((H, W) + meas.shape[1:], dtype=np.float32)
        mask = np.zeros((H, W), dtype=bool)
        idx = np.flatnonzero(vis[v])
        data[pix[v, idx, 0], pix[v, idx, 1]] = meas[idx]
        mask[pix[v, idx, 0], pix[v, idx, 1]] = True
        stacks.append(MeasurementStack(data, mask, float(theta)))
    truth = {}
    V = len(scene.thetas)
    for a in range(V):
        for b in range(V):
            if a == b:
                continue
            ids = np.flatnonzero(vis[a] & vis[b])
            truth[(a, b)] = CorrespondenceSet(ids, pix[a, ids], pix[b, ids],
                                              np.ones(len(ids), dtype=bool))
    if V and not any(len(c) for c in truth.values()):
        raise ConfigurationError("no point is visible in two views")
    return SceneCapture(scene, stacks, truth, pix, vis)


def build_synthetic_scene(shape: str, n_points: int, thetas, rng: np.random.Generator,
                          layout: LightstageLayout | None = None,
                          patterns: list[PhysicalPatternPair] | None = None,
                          rig: PointLightRig | None = None, light_mask=None,
                          sampling: SamplingConfig | None = None, channels: int = 1,
                          homogeneous: dict | None = None, noise_sigma: float = 0.0,
                          noise_rng: np.random.Generator | None = None,
                          image_size: tuple[int, int] = (128, 128)) -> SceneCapture:
    """Render a scene into per-view measurement stacks.

    Lightstage scenes are measured through the physical pattern pairs; pointlight
    scenes store the one-light-at-a-time responses.  ``noise_sigma`` multiplies
    every stored measurement by an independent N(1, sigma) factor.
    """
    if (rig is None) == (layout is None):
        raise ConfigurationError("give exactly one of layout or rig")
    if layout is not None and not patterns:
        raise ConfigurationError("lightstage scenes need lighting patterns")
    scene = make_scene(shape, n_points, thetas, rng, sampling, channels, homogeneous,
                       image_size=image_size)
    responses = scene_responses(scene, layout, rig, light_mask)
    noise_rng = noise_rng or np.random.default_rng(0)

    def measure(v):
        r = responses[v]  # (n, inputs, C)
        if layout is not None:
            m = np.stack([capture_measurements(r[:, :, c], patterns) for c in range(r.shape[2])], axis=-1)
        else:
            m = r
        if noise_sigma > 0:
            m = m * noise_rng.normal(1.0, noise_sigma, size=m.shape)
        return m

    camera = layout.camera if layout is not None else rig.camera
    return capture_scene(scene, measure, camera)


def load_truth(path_or_dict) -> dict:
    if isinstance(path_or_dict, dict):
        return path_or_dict
    with open(path_or_dict) as f:
        return json.load(f)


def truth_pairs(truth: dict, theta_a: float, theta_b: float) -> CorrespondenceSet:
    """Correspondences between the two views of a truth file nearest to the given angles."""
    views = np.asarray(truth["views"])

    def nearest(t):
        d = np.abs((views - t + np.pi) % (2 * np.pi) - np.pi)
        return int(np.argmin(d))

    a, b = nearest(theta_a), nearest(theta_b)
    ids, pa, pb = [], [], []
    for p in truth["points"]:
        if p["pixels"][a] is not None and p["pixels"][b] is not None:
            ids.append(p["id"])
            pa.append(p["pixels"][a])
            pb.append(p["pixels"][b])
    return CorrespondenceSet(np.array(ids, dtype=np.int64), np.array(pa, dtype=np.int64).reshape(-1, 2),
                             np.array(pb, dtype=np.int64).reshape(-1, 2), np.ones(len(ids), dtype=bool))


# -- matching -----------------------------------------------------------------

def _valid(data: np.ndarray, mask: np.ndarray):
    H, W = mask.shape
    idx = np.flatnonzero(mask.ravel())
    return idx, data.reshape(H * W, -1)[idx].astype(np.float64), W


def _sq_dists(X, Y):
    d = np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def match_arrays(data_a, mask_a, data_b, mask_b, truth: CorrespondenceSet | None = None,
                 ratio: float = RATIO_THRESHOLD):
    """Mutual nearest neighbours between two gridded descriptor sets.

    Ties go to the lowest row-major pixel index.  Returns the mutual matches
    and, when ``truth`` is given, the metrics against it.
    """
    ia, A, W = _valid(data_a, mask_a)
    ib, B, _ = _valid(data_b, mask_b)
    if len(ia) == 0 or len(ib) == 0:
        raise ContractError("a feature map has no valid pixels")
    if A.shape[1] != B.shape[1]:
        raise ContractError("descriptor lengths differ")
    D = _sq_dists(A, B)
    nn_ab = np.argmin(D, axis=1)
    nn_ba = np.argmin(D, axis=0)
    mutual = np.flatnonzero(nn_ba[nn_ab] == np.arange(len(ia)))
    if D.shape[1] > 1:
        two = np.partition(D[mutual], 1, axis=1)[:, :2] if len(mutual) else np.zeros((0, 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.sqrt(two[:, 0]) / np.sqrt(two[:, 1])
        ratios = np.where(np.isfinite(ratios), ratios, 1.0)
    else:
        ratios = np.zeros(len(mutual))
    pa = np.stack(np.divmod(ia[mutual], W), axis=1)
    pb = np.stack(np.divmod(ib[nn_ab[mutual]], W), axis=1)
    matches = CorrespondenceSet(np.full(len(mutual), -1), pa, pb)
    if truth is None:
        return matches, None

    pos_a = {int(p): i for i, p in enumerate(ia)}
    pos_b = {int(p): i for i, p in enumerate(ib)}
    ta = np.array([pos_a.get(int(r * W + c), -1) for r, c in truth.pix_a], dtype=np.int64)
    tb = np.array([pos_b.get(int(r * W + c), -1) for r, c in truth.pix_b], dtype=np.int64)
    ok = (ta >= 0) & (tb >= 0)
    ta, tb, ids = ta[ok], tb[ok], truth.point_ids[ok]
    if len(ta) == 0:
        raise ContractError("no ground-truth pair lies on valid pixels of both maps")
    top1 = nn_ab[ta] == tb
    true_d = D[ta, tb]
    # rank = 1 + number of candidates strictly closer, plus earlier-index ties
    closer = np.sum(D[ta] < true_d[:, None], axis=1)
    ties = np.array([np.sum(D[a, :b] == d) for a, b, d in zip(ta, tb, true_d)])
    rank = 1 + closer + ties
    is_mutual = nn_ba[tb] == ta
    b_to_id = dict(zip(tb.tolist(), ids.tolist()))
    a_to_id = dict(zip(ta.tolist(), ids.tolist()))
    correct = np.array([a_to_id.get(int(a), -2) == b_to_id.get(int(nn_ab[a]), -3) for a in mutual],
                       dtype=bool)
    matches.correct = correct
    matches.point_ids = np.array([a_to_id.get(int(a), -1) for a in mutual], dtype=np.int64)
    keep = ratios < ratio
    precision = float(correct[keep].mean()) if keep.any() else 0.0
    metrics = MatchMetrics(
        top1_accuracy=float(top1.mean()),
        mean_rank=float(rank.mean()),
        precision_at_ratio=precision,
        mutual_accuracy=float((top1 & is_mutual).mean()),
        n_truth=int(len(ta)),
        n_candidates=int(len(ib)),
    )
    return matches, metrics


def match_nn(feat_a: FeatureMap, feat_b: FeatureMap, truth: CorrespondenceSet | None = None,
             ratio: float = RATIO_THRESHOLD):
    if feat_a.dim != feat_b.dim:
        raise ContractError("feature maps have different dimensions")
    return match_arrays(feat_a.data, feat_a.mask, feat_b.data, feat_b.mask, truth, ratio)


def baseline_raw_ssd(stack_a: MeasurementStack, stack_b: MeasurementStack,
                     truth: CorrespondenceSet | None = None, ratio: float = RATIO_THRESHOLD):
    """Nearest neighbours on the raw measurement vectors (all measurements and channels)."""
    H, W = stack_a.mask.shape
    da = stack_a.data.reshape(H, W, -1)
    db = stack_b.data.reshape(stack_b.mask.shape + (-1,))
    return match_arrays(da, stack_a.mask, db, stack_b.mask, truth, ratio)[1]


# -- feature statistics ----------------------------------------------------------

def _pair_features(feat_a: FeatureMap, feat_b: FeatureMap, truth: CorrespondenceSet):
    keep = feat_a.mask[truth.pix_a[:, 0], truth.pix_a[:, 1]] & feat_b.mask[truth.pix_b[:, 0], truth.pix_b[:, 1]]
    fa = feat_a.data[truth.pix_a[keep, 0], truth.pix_a[keep, 1]].astype(np.float64)
    fb = feat_b.data[truth.pix_b[keep, 0], truth.pix_b[keep, 1]].astype(np.float64)
    return fa, fb


def distance_stats(feat_a: FeatureMap, feat_b: FeatureMap, truth: CorrespondenceSet) -> dict:
    """Mean same-point cross-view distance vs mean different-point distance."""
    fa, fb = _pair_features(feat_a, feat_b, truth)
    D = np.sqrt(_sq_dists(fa, fb))
    n = len(D)
    intra = float(np.mean(np.diag(D)))
    inter = float((D.sum() - np.trace(D)) / (n * (n - 1)))
    return {"intra": intra, "inter": inter, "ratio": intra / inter, "n": n}


def azimuth_variation(fmap: FeatureMap, capture: SceneCapture, view: int = 0,
                      rings: int = 6) -> float:
    """How much features change around the viewing axis on a sphere, relative to their total spread.

    Visible sphere points are binned into rings of equal angle to the
    camera direction; the statistic is the mean within-ring feature distance
    divided by the mean distance over all visible points.
    """
    scene = capture.scene
    theta = scene.thetas[view]
    ids = np.flatnonzero(capture.visible[view])
    x, frame = turntable_transform(scene.positions[ids], scene.frames[ids], theta)
    pix = capture.pixels[view, ids]
    keep = fmap.mask[pix[:, 0], pix[:, 1]]
    x, frame, pix = x[keep], frame[keep], pix[keep]
    feats = fmap.data[pix[:, 0], pix[:, 1]].astype(np.float64)
    normals = frame[:, :, 2]
    # the camera sits on the -y side of the turntable axis
    polar = np.arccos(np.clip(-normals[:, 1], -1.0, 1.0))
    edges = np.linspace(0.0, polar.max() + 1e-9, rings + 1)
    ring = np.clip(np.digitize(polar, edges) - 1, 0, rings - 1)
    all_d = np.sqrt(_sq_dists(feats, feats))
    total = all_d.sum() / (len(feats) * (len(feats) - 1))
    within = []
    for r in range(rings):
        sel = np.flatnonzero(ring == r)
        if len(sel) < 2:
            continue
        d = all_d[np.ix_(sel, sel)]
        within.append(d.sum() / (len(sel) * (len(sel) - 1)))
    return float(np.mean(within) / total)
