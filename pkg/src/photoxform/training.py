"""Training orchestration: online data synthesis, noise, branch pre-training and joint training."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import netcore as nc
from .errors import ConfigurationError, ContractError, DivergenceError
from .lightstage import LayoutConfig, build_layout, encode_view
from .model import (BRANCHES, DEFAULT_HIDDEN, LIGHTSTAGE, POINTLIGHT, FeatureNet, ModelConfig,
                    load_checkpoint, renormalize_patterns, save_checkpoint)
from .objective import DEFAULT_LAMBDA, loss_reg, pair_loss
from .pointlight import PointLightRig, default_rig, light_mask, render_pointlight_batch
from .shading import SamplingConfig, read_dataset, render_pairs, sample_training_points

log = logging.getLogger(__name__)

# total measurement budget -> (sensitive, insensitive) split
BUDGET_SPLITS = {6: (3, 3), 8: (3, 5), 10: (5, 5)}

STREAM_PRETRAIN = {"sens": 1, "insens": 2}
STREAM_JOINT = 3


def split_budget(budget: int) -> tuple[int, int]:
    if budget < 2:
        raise ConfigurationError("a two-branch network needs a budget of at least 2")
    return BUDGET_SPLITS.get(budget, (budget // 2, budget - budget // 2))


@dataclass(frozen=True)
class TrainConfig:
    mode: str = LIGHTSTAGE
    m_s: int = 3
    m_i: int = 5
    features: int = 16
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    k: int = 32
    iters_pre: int = 20_000
    iters_joint: int = 60_000
    lr: float = 1e-4
    sigma: float = 0.01
    lam: float = DEFAULT_LAMBDA
    seed: int = 0
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    rig: PointLightRig | None = None
    active_lights: int | None = None
    literal_loss: bool = False
    smoothing: int = 500
    log_every: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    dataset: str | None = None

    def __post_init__(self):
        if self.k < 2:
            raise ConfigurationError("k must be at least 2")
        if self.iters_pre < 0 or self.iters_joint < 0:
            raise ConfigurationError("iteration counts must be non-negative")
        if self.sigma < 0:
            raise ConfigurationError("noise sigma must be non-negative")
        if self.mode == POINTLIGHT and self.rig is None:
            object.__setattr__(self, "rig", default_rig())

    @classmethod
    def paper_scale(cls, **kw) -> "TrainConfig":
        kw.setdefault("layout", LayoutConfig.paper_scale())
        return cls(iters_pre=100_000, iters_joint=300_000, **kw)

    @property
    def inputs(self) -> int:
        if self.mode == POINTLIGHT:
            return len(self.rig)
        per = self.layout.per_side
        return 6 * per * per

    def model_config(self, branches: str = "both") -> ModelConfig:
        return ModelConfig(mode=self.mode, inputs=self.inputs, m_s=self.m_s, m_i=self.m_i,
                           features=self.features, branches=branches, hidden=tuple(self.hidden))

    def describe(self) -> dict:
        d = {k: getattr(self, k) for k in ("mode", "m_s", "m_i", "features", "k", "iters_pre",
                                           "iters_joint", "lr", "sigma", "lam", "seed",
                                           "active_lights", "literal_loss", "dataset")}
        d["hidden"] = list(self.hidden)
        d["layout"] = {"per_side": self.layout.per_side, "box": list(self.layout.box),
                       "pitch": self.layout.pitch}
        s = self.sampling
        d["sampling"] = {"rho_d": list(s.rho_d_range), "rho_s": list(s.rho_s_range),
                         "roughness": list(s.roughness_range), "half_extent": s.half_extent,
                         "views": [float(a) for a in np.atleast_1d(s.view_angles)]}
        if self.rig is not None:
            d["rig"] = hashlib.sha256(self.rig.to_json().encode()).hexdigest()[:16]
        return d


@dataclass
class TrainReport:
    l_main: list[float] = field(default_factory=list)
    l_reg: list[float] = field(default_factory=list)
    log_every: int = 1
    wall_time: float = 0.0
    checkpoint_id: str = ""
    pattern_resets: int = 0
    invalid_samples: int = 0
    gradcheck: dict | None = None

    @property
    def iterations(self) -> int:
        return len(self.l_main)

    def curve(self) -> list[tuple[int, float, float]]:
        return [(i, self.l_main[i], self.l_reg[i])
                for i in range(0, self.iterations, self.log_every)]

    def smoothed_final(self, window: int = 500) -> float:
        if not self.l_main:
            return float("nan")
        return float(np.mean(self.l_main[-window:]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "L_main", "L_reg"])
            for i, lm, lr in self.curve():
                w.writerow([i, repr(lm), repr(lr)])


def params_id(net: FeatureNet) -> str:
    return hashlib.sha256(net.store.flat.tobytes()).hexdigest()[:16]


def noise_factors(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    return rng.normal(1.0, sigma, size=shape) if sigma > 0 else np.ones(shape)


def apply_noise(meas, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Multiply every measurement by an independent draw from N(1, sigma)."""
    if sigma < 0:
        raise ConfigurationError("sigma must be non-negative")
    meas = np.asarray(meas)
    if sigma == 0:
        return meas.copy()
    return meas * rng.normal(1.0, sigma, size=meas.shape)


class DataSource:
    """Yields ``(x1, x2, theta1, theta2)`` batches of k points seen from two views."""

    def __init__(self, config: TrainConfig, stream: int):
        self.config = config
        self.rng = np.random.default_rng([config.seed, stream, 0])
        self.layout = build_layout(config.layout) if config.mode == LIGHTSTAGE else None
        self.mask = None
        if config.mode == POINTLIGHT and config.active_lights is not None:
            self.mask = light_mask(config.rig, config.active_lights)
        self.records = None
        if config.dataset:
            self.records, _ = read_dataset(config.dataset)
            if len(self.records) < 2 * config.k:
                raise ConfigurationError("dataset holds fewer than k view pairs")
            self.cursor = 0

    @property
    def camera(self):
        return self.layout.camera if self.layout is not None else self.config.rig.camera

    def next_batch(self):
        k = self.config.k
        if self.records is not None:
            n_pairs = len(self.records) // 2
            idx = (self.cursor + np.arange(k)) % n_pairs
            self.cursor = (self.cursor + k) % n_pairs
            r1, r2 = self.records[2 * idx], self.records[2 * idx + 1]
            return (r1["lumitexel"].astype(np.float64), r2["lumitexel"].astype(np.float64),
                    r1["theta"].astype(np.float64), r2["theta"].astype(np.float64))
        pts = sample_training_points(self.rng, self.config.sampling, k, self.camera)
        if self.config.mode == LIGHTSTAGE:
            x1, x2 = render_pairs(self.layout, pts)
        else:
            args = (pts.rho_d, pts.rho_s, pts.alpha_x, pts.alpha_y)
            x1 = render_pointlight_batch(self.config.rig, pts.positions, pts.frames, pts.theta1,
                                         *args, mask=self.mask)
            x2 = render_pointlight_batch(self.config.rig, pts.positions, pts.frames, pts.theta2,
                                         *args, mask=self.mask)
        return x1, x2, pts.theta1, pts.theta2


def draw_noise(net: FeatureNet, rng: np.random.Generator, n: int, sigma: float) -> dict:
    cfg = net.config
    if cfg.has_patterns:
        return {b: noise_factors(rng, (n, cfg.measurement_count(b)), sigma) for b in cfg.active}
    shared = noise_factors(rng, (n, cfg.inputs), sigma)
    return {b: shared for b in cfg.active}


def batch_loss(net: FeatureNet, x1, x2, t1, t2, noise: dict, lam: float,
               literal: bool = False, need_grad: bool = True):
    """Total loss of one two-view batch; fills ``net.store.grads`` when ``need_grad``."""
    k = len(x1)
    x = np.concatenate([x1, x2])
    v = encode_view(np.concatenate([t1, t2]))
    out, tape = net.forward(x, v, noise, tape=True)
    l_main, dh1, dh2 = pair_loss(out[:k], out[k:], literal)
    l_reg = 0.0
    if "combine.W" in net.store:
        l_reg, sub = loss_reg(net.store["combine.W"])
    if need_grad:
        net.backward(tape, np.concatenate([dh1, dh2]))
        if "combine.W" in net.store:
            net.store.grads["combine.W"] += lam * sub
    return l_main, l_reg, tape


def _optimize(net: FeatureNet, config: TrainConfig, iterations: int, stream: int,
              lam: float, report: TrainReport, tag: str, trainable: np.ndarray | None = None):
    source = DataSource(config, stream)
    noise_rng = np.random.default_rng([config.seed, stream, 1])
    reinit_rng = np.random.default_rng([config.seed, stream, 3])
    opt = nc.Adam(lr=config.lr)
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    for it in range(iterations):
        x1, x2, t1, t2 = source.next_batch()
        noise = draw_noise(net, noise_rng, 2 * len(x1), config.sigma)
        l_main, l_reg, tape = batch_loss(net, x1, x2, t1, t2, noise, lam, config.literal_loss)
        if not (np.isfinite(l_main) and np.isfinite(l_reg)):
            raise DivergenceError(f"{tag}: non-finite loss at iteration {it}")
        opt.step(net.store, trainable)
        if net.config.has_patterns:
            report.pattern_resets += len(renormalize_patterns(net.store, reinit_rng))
        report.invalid_samples += int(tape.invalid.sum())
        report.l_main.append(l_main)
        report.l_reg.append(l_reg)
        if it % 5000 == 0:
            log.info("%s iter %d L_main %.4f L_reg %.4f", tag, it, l_main, l_reg)
        if ckdir and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            ckdir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckdir / f"{tag}_{it + 1:07d}.pftc", net, config.layout)


def pretrain_branch(which: str, config: TrainConfig, iterations: int | None = None):
    """Train one branch alone on L_main of its unit features."""
    if which not in BRANCHES:
        raise ConfigurationError(f"unknown branch {which!r}")
    iterations = config.iters_pre if iterations is None else iterations
    stream = STREAM_PRETRAIN[which]
    net = FeatureNet(config.model_config(which), rng=np.random.default_rng([config.seed, stream, 2]))
    report = TrainReport(log_every=config.log_every)
    start = time.perf_counter()
    _optimize(net, config, iterations, stream, 0.0, report, f"pretrain-{which}")
    report.wall_time = time.perf_counter() - start
    report.checkpoint_id = params_id(net)
    return net, report


def assemble_joint(config: TrainConfig, init: dict[str, FeatureNet] | None = None) -> FeatureNet:
    """Full two-branch model; branch weights are copied from ``init`` where given."""
    net = FeatureNet(config.model_config("both"),
                     rng=np.random.default_rng([config.seed, STREAM_JOINT, 2]))
    for which, branch_net in (init or {}).items():
        if branch_net.config.branches != which:
            raise ContractError(f"checkpoint for {which} holds branch {branch_net.config.branches}")
        expected = config.model_config(which).shapes()
        if branch_net.store.shapes != expected:
            raise ContractError(f"{which} checkpoint is incompatible with this configuration")
        net.store.load(branch_net.store.params)
    return net


def train_joint(config: TrainConfig, init: dict[str, FeatureNet] | None = None,
                iterations: int | None = None):
    """Optimize every parameter, patterns included, against L_main + lambda L_reg."""
    iterations = config.iters_joint if iterations is None else iterations
    net = assemble_joint(config, init)
    report = TrainReport(log_every=config.log_every)
    start = time.perf_counter()
    _optimize(net, config, iterations, STREAM_JOINT, config.lam, report, "joint")
    report.wall_time = time.perf_counter() - start
    report.checkpoint_id = params_id(net)
    return net, report


def train_full(config: TrainConfig):
    """Pre-train both branches, then train the complete network."""
    init, reports = {}, {}
    for which in BRANCHES:
        init[which], reports[which] = pretrain_branch(which, config)
    net, reports["joint"] = train_joint(config, init)
    return net, reports


def train_branch_only(which: str, config: TrainConfig):
    """Single-branch ablation with the same total schedule as the full network."""
    return pretrain_branch(which, config, config.iters_pre + config.iters_joint)


def budget_config(base: TrainConfig, budget: int, seed: int | None = None) -> TrainConfig:
    m_s, m_i = split_budget(budget)
    return replace(base, m_s=m_s, m_i=m_i, seed=base.seed if seed is None else seed)


def sensitive_only_config(base: TrainConfig, budget: int, seed: int | None = None) -> TrainConfig:
    return replace(base, m_s=budget, seed=base.seed if seed is None else seed)


def model_gradcheck(seed: int = 0, k: int = 4, precision: str = "double",
                    mode: str = LIGHTSTAGE, m_s: int = 3, m_i: int = 5,
                    layout: LayoutConfig | None = None, tolerance: float | None = None,
                    max_entries: int | None = 256, step: float = 1e-6) -> nc.GradCheckReport:
    """Finite-difference check of the full training loss for a freshly initialized model.

    One fixed batch of ``k`` rendered view pairs with fixed measurement noise is
    used; every parameter group is checked, lighting patterns included.
    """
    if precision not in ("single", "double"):
        raise ConfigurationError("precision must be 'single' or 'double'")
    dtype = np.float32 if precision == "single" else np.float64
    if tolerance is None:
        tolerance = 1e-4 if precision == "single" else 1e-7
    config = TrainConfig(mode=mode, m_s=m_s, m_i=m_i, k=k, seed=seed,
                         layout=layout or LayoutConfig())
    net = FeatureNet(config.model_config("both"), rng=np.random.default_rng([seed, 9, 2]),
                     dtype=dtype)
    x1, x2, t1, t2 = DataSource(config, 9).next_batch()
    noise = draw_noise(net, np.random.default_rng([seed, 9, 1]), 2 * k, config.sigma)

    def loss_fn(store, need_grad):
        probe = net.with_store(store)
        store.zero_grad()
        l_main, l_reg, _ = batch_loss(probe, x1, x2, t1, t2, noise, config.lam,
                                      need_grad=need_grad)
        grad = store.grad_flat.astype(np.float64) if need_grad else None
        return (l_main, config.lam * l_reg), grad

    return nc.grad_check(loss_fn, net.store, tolerance, max_entries=max_entries,
                         rng=np.random.default_rng([seed, 9, 4]), step=step)


# -- cached runs and the budget trend -------------------------------------------

RUN_CACHE_VERSION = 1
RUN_KINDS = ("full", "sens-only")


def run_key(kind: str, config: TrainConfig) -> str:
    payload = {"kind": kind, "version": RUN_CACHE_VERSION, "config": config.describe()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def cached_run(kind: str, config: TrainConfig, cache_dir=None):
    """Train (or reload) a full network or the sensitive-only ablation.

    Returns ``(net, summary)`` where the summary holds the smoothed final
    L_main of every stage and loss curves subsampled every 100 iterations.
    With ``cache_dir`` set, results are stored under a hash of the
    configuration and reused on the next call.
    """
    if kind not in RUN_KINDS:
        raise ConfigurationError(f"unknown run kind {kind!r}")
    key = run_key(kind, config)
    if cache_dir is not None:
        cache = Path(cache_dir)
        ckpt, meta = cache / f"{key}.pftc", cache / f"{key}.json"
        if ckpt.exists() and meta.exists():
            net, _ = load_checkpoint(ckpt)
            return net, json.loads(meta.read_text())
    if kind == "full":
        net, reports = train_full(config)
    else:
        net, report = train_branch_only("sens", config)
        reports = {"sens": report}
    summary = {
        "kind": kind, "key": key, "config": config.describe(),
        "final": {k: r.smoothed_final(config.smoothing) for k, r in reports.items()},
        "curves": {k: r.l_main[::100] for k, r in reports.items()},
        "wall_time": sum(r.wall_time for r in reports.values()),
        "pattern_resets": sum(r.pattern_resets for r in reports.values()),
    }
    summary["l_main"] = summary["final"]["joint" if kind == "full" else "sens"]
    if cache_dir is not None:
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, net, config.layout, {"run": key})
        meta.write_text(json.dumps(summary))
    return net, summary


def eval_trend(base: TrainConfig, budgets=(6, 8, 10), seeds=(0,), cache_dir=None,
               sensitive_only: bool = True) -> list[dict]:
    """Final smoothed L_main of the full network per (budget, seed), optionally with the ablation."""
    rows = []
    for budget in budgets:
        for seed in seeds:
            cfg = budget_config(base, budget, seed)
            _, full = cached_run("full", cfg, cache_dir)
            row = {"budget": budget, "seed": seed, "m_s": cfg.m_s, "m_i": cfg.m_i,
                   "l_main": full["l_main"]}
            if sensitive_only:
                _, ablation = cached_run("sens-only", sensitive_only_config(base, budget, seed), cache_dir)
                row["sens_only_l_main"] = ablation["l_main"]
            rows.append(row)
    return rows


def trend_means(rows: list[dict]) -> dict[int, float]:
    out = {}
    for budget in sorted({r["budget"] for r in rows}):
        out[budget] = float(np.mean([r["l_main"] for r in rows if r["budget"] == budget]))
    return out
