"""Command-line entry point: ``photoxform <subcommand> [flags]``.

Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure.
Every output file gets a ``<output>.manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import features as ft
from .errors import ConfigurationError, PhotoxformError
from .lightstage import LayoutConfig, build_layout, turntable_angles
from .matching import build_synthetic_scene, match_nn, truth_pairs
from .model import LIGHTSTAGE, POINTLIGHT, layout_config_from_manifest, load_checkpoint, save_checkpoint
from .patterns import export_patterns, write_patterns_csv
from .pointlight import PointLightRig, default_rig, light_mask
from .shading import SamplingConfig, pairs_to_records, render_pairs, sample_training_points, write_dataset
from .training import (TrainConfig, eval_trend, model_gradcheck, split_budget, train_branch_only,
                       train_full, trend_means)

SUBCOMMANDS = ("synth", "train", "export-patterns", "extract", "match", "viz", "gradcheck", "eval-trend")
THREADS_ENV = "PHOTOXFORM_THREADS"

log = logging.getLogger("photoxform")


class UsageError(Exception):
    def __init__(self, message: str, parser: argparse.ArgumentParser | None = None):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="photoxform", description="Learned lighting patterns and photometric features.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    s = sub.add_parser("synth", help="render a lumitexel dataset or a multi-view test scene")
    s.add_argument("--layout", default="desk", help="desk, paper, or a JSON file with per_side/box/pitch")
    s.add_argument("--count", type=int, default=1024, help="number of points (two views each)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="LTX1 file, or an output directory with --scene")
    s.add_argument("--scene", choices=("cloud", "sphere"), help="write per-view measurement stacks instead")
    s.add_argument("--ckpt", help="model whose patterns (or light rig) measure the scene")
    s.add_argument("--views", type=_int_list, default=[0, 1], help="turntable view indices (of 24)")
    s.add_argument("--noise", type=float, default=0.0, help="multiplicative measurement noise sigma")
    s.add_argument("--size", type=int, default=128, help="image height and width in pixels")
    s.add_argument("--rig", help="pointlight rig JSON (pointlight checkpoints)")
    s.add_argument("--active-lights", type=int, help="mask the rig to this many lights")

    t = sub.add_parser("train", help="pre-train both branches then train the full network")
    t.add_argument("--mode", choices=(LIGHTSTAGE, POINTLIGHT), default=LIGHTSTAGE)
    t.add_argument("--budget", default="3,5", help="'Ms,Mi', or a total such as 8")
    t.add_argument("--branches", choices=("both", "sens", "insens"), default="both")
    t.add_argument("--k", type=int, default=32)
    t.add_argument("--iters-pre", type=int, default=20_000)
    t.add_argument("--iters-joint", type=int, default=60_000)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--sigma", type=float, default=0.01)
    t.add_argument("--lam", type=float, default=3.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--dataset", help="train from an LTX1 file instead of on-line rendering")
    t.add_argument("--paper-scale", action="store_true", help="64x64 emitters per face, 100K+300K iterations")
    t.add_argument("--layout", default=None)
    t.add_argument("--rig")
    t.add_argument("--active-lights", type=int)
    t.add_argument("--curve", help="loss-curve CSV (default: <out>.loss.csv)")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--literal-loss", action="store_true", help="use exp(+d) similarities")

    e = sub.add_parser("export-patterns", help="write the learned patterns as non-negative pairs")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)

    x = sub.add_parser("extract", help="per-pixel features from measurement stacks")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--stack", action="append", required=True)
    x.add_argument("--out", action="append", required=True)
    x.add_argument("--pca", help="apply this PCAM model to the features")
    x.add_argument("--fit-pca", type=int, metavar="D", help="fit a D-dimensional PCA over all given stacks")
    x.add_argument("--pca-out", help="where to write the fitted PCA model")

    m = sub.add_parser("match", help="mutual nearest-neighbour matching of two feature maps")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--truth", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--ratio", type=float, default=0.8)

    v = sub.add_parser("viz", help="render a feature map to PNG")
    v.add_argument("--map", required=True)
    v.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full model's gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--mode", choices=(LIGHTSTAGE, POINTLIGHT), default=LIGHTSTAGE)
    g.add_argument("--precision", choices=("single", "double", "both"), default="both")
    g.add_argument("--out", help="JSON report path")

    r = sub.add_parser("eval-trend", help="final smoothed L_main across measurement budgets")
    r.add_argument("--budgets", type=_int_list, default=[6, 8, 10])
    r.add_argument("--seeds", type=_int_list, default=[0])
    r.add_argument("--k", type=int, default=32)
    r.add_argument("--iters-pre", type=int, default=20_000)
    r.add_argument("--iters-joint", type=int, default=60_000)
    r.add_argument("--no-sens-only", action="store_true", help="skip the sensitive-only ablation")
    r.add_argument("--cache", help="directory for reusable training results")
    r.add_argument("--out", required=True)
    return p


# -- helpers --------------------------------------------------------------------

def resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}")
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise UsageError("--threads must be at least 1")
    return value


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(output, command: str, config: dict, seed, inputs, outputs, wall: float) -> Path:
    path = Path(f"{output}.manifest.json")
    doc = {"subcommand": command, "config": config, "seed": seed,
           "inputs": [str(i) for i in inputs], "outputs": [str(o) for o in outputs],
           "version": _version(), "wall_time": wall}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def load_layout_config(spec: str | None) -> LayoutConfig:
    if spec in (None, "desk"):
        return LayoutConfig()
    if spec == "paper":
        return LayoutConfig.paper_scale()
    try:
        d = json.loads(Path(spec).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"layout file {spec} not found")
    return LayoutConfig(per_side=int(d["per_side"]), box=tuple(d["box"]), pitch=float(d["pitch"]))


def load_rig(path: str | None) -> PointLightRig:
    return PointLightRig.from_json(Path(path).read_text()) if path else default_rig()


def parse_budget(text: str) -> tuple[int, int]:
    parts = _int_list(text)
    if len(parts) == 1:
        return split_budget(parts[0])
    if len(parts) != 2 or min(parts) < 1:
        raise UsageError(f"--budget expects 'Ms,Mi' or a total, got {text!r}")
    return parts[0], parts[1]


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args, threads):
    if args.scene:
        return _synth_scene(args)
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    layout_cfg = load_layout_config(args.layout)
    layout = build_layout(layout_cfg)
    rng = np.random.default_rng([args.seed, 0, 0])
    sampling = SamplingConfig()
    chunks, left = [], args.count
    while left > 0:
        n = min(left, 1024)
        pts = sample_training_points(rng, sampling, n, layout.camera)
        lum1, lum2 = render_pairs(layout, pts)
        chunks.append(pairs_to_records(layout, pts, lum1, lum2))
        left -= n
    records = np.concatenate(chunks)
    write_dataset(args.out, records, layout)
    config = {"layout": {"per_side": layout_cfg.per_side, "box": list(layout_cfg.box),
                         "pitch": layout_cfg.pitch}, "count": args.count, "records": len(records)}
    return [args.out], config, args.seed


def _synth_scene(args):
    if not args.ckpt:
        raise UsageError("--scene needs --ckpt to measure the scene")
    net, manifest = load_checkpoint(args.ckpt)
    thetas = turntable_angles(24)[args.views]
    rng = np.random.default_rng([args.seed, 10, 0])
    noise_rng = np.random.default_rng([args.seed, 10, 1])
    kw = dict(noise_sigma=args.noise, noise_rng=noise_rng, image_size=(args.size, args.size))
    if net.config.mode == POINTLIGHT:
        rig = load_rig(args.rig)
        mask = light_mask(rig, args.active_lights) if args.active_lights else None
        cap = build_synthetic_scene(args.scene, args.count, thetas, rng, rig=rig, light_mask=mask, **kw)
    else:
        layout = build_layout(layout_config_from_manifest(manifest) or LayoutConfig())
        cap = build_synthetic_scene(args.scene, args.count, thetas, rng, layout=layout,
                                    patterns=export_patterns(net), **kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, stack in enumerate(cap.stacks):
        path = out / f"view_{i}.mstk"
        ft.write_stack(path, stack)
        outputs.append(path)
    truth = out / "scene.json"
    truth.write_text(json.dumps(cap.truth_json()))
    outputs.append(truth)
    config = {"scene": args.scene, "points": args.count, "views": args.views,
              "noise": args.noise, "size": args.size, "ckpt": args.ckpt}
    for path in outputs:
        write_manifest(path, "synth", config, args.seed, [args.ckpt], outputs, 0.0)
    return [], config, args.seed


def cmd_train(args, threads):
    m_s, m_i = parse_budget(args.budget)
    kw = dict(mode=args.mode, m_s=m_s, m_i=m_i, k=args.k, lr=args.lr, sigma=args.sigma, lam=args.lam,
              seed=args.seed, dataset=args.dataset, literal_loss=args.literal_loss,
              checkpoint_every=args.checkpoint_every,
              checkpoint_dir=str(Path(args.out).parent / "checkpoints") if args.checkpoint_every else None)
    if args.mode == POINTLIGHT:
        kw["rig"] = load_rig(args.rig)
        kw["active_lights"] = args.active_lights
    if args.paper_scale:
        config = TrainConfig.paper_scale(**kw)
    else:
        config = TrainConfig(iters_pre=args.iters_pre, iters_joint=args.iters_joint,
                             layout=load_layout_config(args.layout), **kw)
    if args.branches == "both":
        net, reports = train_full(config)
    else:
        net, report = train_branch_only(args.branches, config)
        reports = {args.branches: report}
    save_checkpoint(args.out, net, config.layout, {"train": config.describe()})
    curve = args.curve or f"{args.out}.loss.csv"
    _write_curves(curve, reports)
    finals = {k: r.smoothed_final(config.smoothing) for k, r in reports.items()}
    print(json.dumps({"smoothed_final_l_main": finals}))
    desc = config.describe()
    desc["branches"] = args.branches
    desc["smoothed_final_l_main"] = finals
    inputs = [args.dataset] if args.dataset else []
    write_manifest(curve, "train", desc, args.seed, inputs, [args.out, curve], 0.0)
    return [args.out], desc, args.seed


def _write_curves(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "iteration", "L_main", "L_reg"])
        for stage, report in reports.items():
            for i, lm, lr in report.curve():
                w.writerow([stage, i, repr(lm), repr(lr)])


def cmd_export(args, threads):
    net, _ = load_checkpoint(args.ckpt)
    pairs = export_patterns(net)
    write_patterns_csv(args.out, pairs)
    return [args.out], {"ckpt": args.ckpt, "patterns": len(pairs)}, None


def cmd_extract(args, threads):
    if len(args.stack) != len(args.out):
        raise UsageError("give one --out per --stack")
    if args.pca and args.fit_pca:
        raise UsageError("--pca and --fit-pca are exclusive")
    net, _ = load_checkpoint(args.ckpt)
    maps = [ft.extract(ft.read_stack(s), net, threads=threads) for s in args.stack]
    outputs = list(args.out)
    pca = None
    if args.pca:
        pca = ft.read_pca(args.pca)
    elif args.fit_pca:
        pca = ft.fit_pca(maps, args.fit_pca)
        if args.pca_out:
            ft.write_pca(args.pca_out, pca)
            outputs.append(args.pca_out)
    if pca is not None:
        maps = [ft.project(m, pca) for m in maps]
    for m, path in zip(maps, args.out):
        ft.write_feature_map(path, m)
    config = {"ckpt": args.ckpt, "pca": args.pca, "fit_pca": args.fit_pca, "threads": threads}
    for path in outputs[len(args.out):]:
        write_manifest(path, "extract", config, None, args.stack, outputs, 0.0)
    return list(args.out), config, None


def cmd_match(args, threads):
    fa, fb = ft.read_feature_map(args.a), ft.read_feature_map(args.b)
    with open(args.truth) as f:
        truth = truth_pairs(json.load(f), fa.theta, fb.theta)
    _, metrics = match_nn(fa, fb, truth, ratio=args.ratio)
    Path(args.out).write_text(json.dumps(metrics.to_dict(), indent=2))
    print(json.dumps(metrics.to_dict()))
    return [args.out], {"a": args.a, "b": args.b, "truth": args.truth, "ratio": args.ratio}, None


def cmd_viz(args, threads):
    fmap = ft.read_feature_map(args.map)
    ft.save_png(args.out, ft.visualize(fmap))
    return [args.out], {"map": args.map}, None


def cmd_gradcheck(args, threads):
    precisions = ("single", "double") if args.precision == "both" else (args.precision,)
    doc, ok = {}, True
    for p in precisions:
        rep = model_gradcheck(seed=args.seed, k=args.k, precision=p, mode=args.mode)
        doc[p] = rep.to_dict()
        ok &= rep.passed
        print(f"{p}: max relative error {rep.max_error:.3e} (tolerance {rep.tolerance:g}) "
              f"{'PASS' if rep.passed else 'FAIL: ' + ', '.join(rep.failures)}")
    outputs = []
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2))
        outputs.append(args.out)
    if not ok:
        raise _Failed("gradient check failed")
    return outputs, {"k": args.k, "mode": args.mode, "precision": args.precision}, args.seed


def cmd_eval_trend(args, threads):
    base = TrainConfig(k=args.k, iters_pre=args.iters_pre, iters_joint=args.iters_joint)
    rows = eval_trend(base, args.budgets, args.seeds, args.cache, not args.no_sens_only)
    means = trend_means(rows)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        header = ["budget", "m_s", "m_i", "seeds", "l_main"]
        if not args.no_sens_only:
            header.append("sens_only_l_main")
        w.writerow(header)
        for budget in means:
            sel = [r for r in rows if r["budget"] == budget]
            line = [budget, sel[0]["m_s"], sel[0]["m_i"], " ".join(str(r["seed"]) for r in sel),
                    repr(means[budget])]
            if not args.no_sens_only:
                line.append(repr(float(np.mean([r["sens_only_l_main"] for r in sel]))))
            w.writerow(line)
    values = [means[b] for b in means]
    monotone = all(b <= a for a, b in zip(values, values[1:]))
    print(f"non-increasing across budgets: {monotone}")
    config = {"budgets": args.budgets, "seeds": args.seeds, "k": args.k, "iters_pre": args.iters_pre,
              "iters_joint": args.iters_joint, "rows": rows, "non_increasing": monotone}
    return [args.out], config, args.seeds


class _Failed(Exception):
    pass


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "export-patterns": cmd_export,
            "extract": cmd_extract, "match": cmd_match, "viz": cmd_viz,
            "gradcheck": cmd_gradcheck, "eval-trend": cmd_eval_trend}


def _suggest(message: str, argv: list[str], parser: argparse.ArgumentParser) -> str | None:
    if "unrecognized arguments:" in message:
        bad = message.split("unrecognized arguments:", 1)[1].split()
        options = list(parser._option_string_actions)
        command = next((a for a in argv if a in HANDLERS), None)
        if command:
            sub = parser._subparsers._group_actions[0].choices[command]
            options += list(sub._option_string_actions)
        for word in bad:
            close = difflib.get_close_matches(word, options, n=1)
            if close:
                return f"did you mean {close[0]}?"
    if "invalid choice:" in message:
        word = message.split("invalid choice:", 1)[1].split("'")[1] if "'" in message else ""
        close = difflib.get_close_matches(word, SUBCOMMANDS, n=1)
        if close:
            return f"did you mean {close[0]}?"
    return None


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        threads = resolve_threads(args.threads)
    except UsageError as e:
        (e.parser or parser).print_usage(sys.stderr)
        print(f"photoxform: error: {e}", file=sys.stderr)
        hint = _suggest(str(e), argv, parser)
        if hint:
            print(f"photoxform: {hint}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        outputs, config, seed = HANDLERS[args.command](args, threads)
    except UsageError as e:
        print(f"photoxform: error: {e}", file=sys.stderr)
        return 1
    except (_Failed, PhotoxformError, OSError, KeyError, ValueError) as e:
        print(f"photoxform {args.command}: {e}", file=sys.stderr)
        return 2
    wall = time.perf_counter() - start
    inputs = [getattr(args, k) for k in ("ckpt", "dataset", "map", "a", "b", "truth", "pca")
              if getattr(args, k, None)]
    inputs += getattr(args, "stack", None) or []
    for out in outputs:
        write_manifest(out, args.command, config, seed, inputs, outputs, wall)
    return 0


if __name__ == "__main__":
    sys.exit(main())
