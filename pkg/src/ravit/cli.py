"""Command-line entry point: ``ravit {build,fuse,verify,bench,detect,info}``.

Every command emits a JSON report ``{command, config, results, timestamp}``
to stdout, or to ``--report PATH`` together with a PNG figure at the same path
with a ``.png`` suffix.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import sys
from pathlib import Path

import numpy as np

from . import figures, persist
from .backbone import (PRESETS, Model, build_variant, count_params_flops, forward, fuse_model, get_variant,
                       stage_param_counts)
from .bench import BenchReport, time_fn
from .detector import FastCOS, build_detector, fastcos_forward, fuse_detector, pad_to_multiple
from .ppm import normalize, read_ppm
from .state import count_params
from .tensor import DTYPE
from .verify import model_outputs, verify_model


class CommandError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return h, w


def emit(args, command: str, config: dict, results: dict, figure=None) -> dict:
    report = {
        "command": command,
        "config": config,
        "results": results,
        "timestamp": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        path = Path(args.report)
        path.write_text(text + "\n")
        if figure is not None:
            figure(path.with_suffix(".png"))
    else:
        print(text)
    return report


def _load_unfused(path) -> tuple[Model | FastCOS, dict]:
    model, meta = persist.load(path)
    if model.fused:
        raise CommandError(f"{path} holds an already-fused model; expected an unfused one")
    return model, meta


def _spot_check(unfused, fused, seed: int) -> float:
    hw = (64, 64) if isinstance(unfused, FastCOS) else (224, 224)
    x = np.random.default_rng(seed).standard_normal((1, *hw, 3)).astype(DTYPE)
    worst = 0.0
    for a, b in zip(model_outputs(unfused, x), model_outputs(fused, x)):
        worst = max(worst, float(np.abs(a.astype(np.float64) - b).max()))
    return worst


# -------------------------------------------------------------------- commands


def cmd_build(args) -> int:
    cfg = get_variant(args.variant)
    zeros = args.init == "zeros"
    if args.detector:
        model = build_detector(cfg, args.seed, num_classes=args.num_classes or 10, neck_width=args.neck_width,
                               perturb_bn=args.perturb_bn, zeros=zeros)
        per_part = {k: count_params(getattr(model, k)) for k in ("backbone", "neck", "head")}
    else:
        if args.num_classes:
            cfg = dataclasses.replace(cfg, num_classes=args.num_classes)
        model = build_variant(cfg, args.seed, perturb_bn=args.perturb_bn, zeros=zeros)
        per_part = stage_param_counts(model)
    size = persist.save(model, args.out, seed=args.seed, init=args.init, perturb_bn=args.perturb_bn)
    params = sum(a.size for a in model.state_dict().values())
    results = {"out": str(args.out), "bytes": size, "params": params, "params_m": params / 1e6,
               "per_part_params": per_part, "fused": False}
    emit(args, "build", persist.describe(model), results,
         lambda p: figures.plot_param_breakdown(per_part, p, f"{cfg.name} parameters"))
    return 0


def cmd_fuse(args) -> int:
    model, meta = _load_unfused(args.input)
    fused = fuse_detector(model) if isinstance(model, FastCOS) else fuse_model(model)
    diff = _spot_check(model, fused, args.seed)
    cert = {"seed": args.seed, "max_abs_diff": diff, "tol": args.tol, "pass": diff <= args.tol}
    before = Path(args.input).stat().st_size
    extra = {k: meta[k] for k in ("seed", "init", "perturb_bn") if k in meta}
    after = persist.save(fused, args.out, certificate=cert, **extra)
    results = {"in": str(args.input), "out": str(args.out), "bytes_before": before, "bytes_after": after,
               "params_before": sum(a.size for a in model.state_dict().values()),
               "params_after": sum(a.size for a in fused.state_dict().values()), "certificate": cert}
    emit(args, "fuse", persist.describe(fused), results)
    return 0 if cert["pass"] else 1


def cmd_verify(args) -> int:
    model, _ = _load_unfused(args.input)
    fused = None
    if args.fused:
        fused, _ = persist.load(args.fused)
        if not fused.fused:
            raise CommandError(f"{args.fused} is not a fused model")
    result = verify_model(model, fused, trials=args.trials, tol=args.tol, model_tol=args.model_tol, seed=args.seed)
    emit(args, "verify", persist.describe(model), result, lambda p: figures.plot_verification(result, p))
    if not result["pass"]:
        bad = result["failed"] or ["whole model"]
        print(f"verification failed: {', '.join(bad)}", file=sys.stderr)
        return 1
    return 0


def _bench_one(model, shape, args, label: str) -> BenchReport:
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal(shape).astype(DTYPE)
    notes = {}
    if isinstance(model, FastCOS):
        fn = lambda: fastcos_forward(model, x)  # noqa: E731
        notes["padded_input_shape"] = list(pad_to_multiple(x[:, :, :, :1]).shape[:3]) + [3]
        notes["reference_resolution_1280x720"] = tuple(shape[1:3]) == (720, 1280)
    else:
        fn = lambda: forward(model, x)  # noqa: E731
    lat = time_fn(fn, args.warmup, args.iters, args.threads or None)
    return BenchReport(label, model.fused, list(shape), args.warmup, args.iters, lat, args.threads or None, notes)


def cmd_bench(args) -> int:
    model, meta = persist.load(args.input)
    h, w = args.input_hw
    if not isinstance(model, FastCOS) and (h % 32 or w % 32):
        raise CommandError(f"input {h}x{w} must be divisible by 32")
    name = meta["config"]["backbone"]["name"] if meta["kind"] == "detector" else meta["config"]["name"]
    variants = []
    if args.compare or not args.fused:
        if model.fused:
            raise CommandError(f"{args.input} is fused; an unfused timing needs the unfused file")
        variants.append(model)
    if args.compare or args.fused:
        if model.fused:
            variants.append(model)
        else:
            variants.append(fuse_detector(model) if isinstance(model, FastCOS) else fuse_model(model))
    shape = (args.batch, h, w, 3)
    reports = [_bench_one(m, shape, args, name).to_dict() for m in variants]
    results = {"runs": reports}
    if len(reports) == 2:
        results["speedup"] = reports[0]["mean_ms"] / reports[1]["mean_ms"]
    emit(args, "bench", persist.describe(model), results, lambda p: figures.plot_latencies(reports, p))
    return 0


def cmd_detect(args) -> int:
    model, meta = persist.load(args.input)
    if not isinstance(model, FastCOS):
        raise CommandError(f"{args.input} does not hold a detector")
    norm = meta["normalization"]
    lines = []
    counts = {}
    for image_path in args.image:
        pixels = read_ppm(image_path)
        x = normalize(pixels, norm["mean"], norm["std"])
        dets = fastcos_forward(model, x, score_thresh=args.score_thresh, iou_thresh=args.iou,
                               topk=args.topk, max_out=args.max_out)[0]
        image_id = Path(image_path).stem
        counts[image_id] = len(dets)
        lines.extend(json.dumps(d.to_json(image_id), sort_keys=True) for d in dets)
    Path(args.out).write_text("".join(line + "\n" for line in lines))
    emit(args, "detect", persist.describe(model), {"out": str(args.out), "detections": counts})
    return 0


def cmd_info(args) -> int:
    if args.input:
        model, _ = persist.load(args.input)
    else:
        model = build_variant(get_variant(args.variant), 0, zeros=True)
    if isinstance(model, FastCOS):
        results = {"params": model.param_count()}
    else:
        results = count_params_flops(model, args.input_hw)
    emit(args, "info", persist.describe(model), results)
    return 0


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ravit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_report(p):
        p.add_argument("--report", help="write the JSON report (and a .png figure) here instead of stdout")

    p = sub.add_parser("build", help="construct a preset with seeded weights")
    p.add_argument("--variant", required=True, choices=list(PRESETS), type=str.upper)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--detector", action="store_true", help="build the detector around the backbone")
    p.add_argument("--num-classes", type=_positive_int)
    p.add_argument("--neck-width", type=_positive_int, default=128)
    p.add_argument("--init", choices=["normal", "zeros"], default="normal")
    p.add_argument("--perturb-bn", action="store_true", help="draw non-trivial batch-norm statistics")
    add_report(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("fuse", help="fold branches and normalizations into deploy form")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=5e-4)
    add_report(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("verify", help="check fused and branchy forms agree")
    p.add_argument("--in", dest="input", required=True, help="unfused model")
    p.add_argument("--fused", help="fused model to check against --in (default: fuse in memory)")
    p.add_argument("--trials", type=_positive_int, default=2)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--model-tol", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    add_report(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time inference after a warm-up")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--input", dest="input_hw", type=_hw, default=(224, 224), metavar="HxW")
    p.add_argument("--warmup", type=_non_negative_int, default=20)
    p.add_argument("--iters", type=_positive_int, default=50)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--fused", dest="fused", action="store_true", default=True)
    group.add_argument("--unfused", dest="fused", action="store_false")
    p.add_argument("--compare", action="store_true", help="time unfused then fused and report the speedup")
    p.add_argument("--threads", type=_non_negative_int, default=1, help="BLAS threads; 0 leaves the default")
    p.add_argument("--batch", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    add_report(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("detect", help="run the detector on PPM images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--out", required=True, help="JSON-lines detections")
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--iou", type=float, default=0.6)
    p.add_argument("--topk", type=_positive_int, default=1000)
    p.add_argument("--max-out", type=_positive_int, default=100)
    add_report(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("info", help="parameter and FLOP counts")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="input")
    src.add_argument("--variant", choices=list(PRESETS), type=str.upper)
    p.add_argument("--input", dest="input_hw", type=_hw, default=(224, 224), metavar="HxW")
    add_report(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
