"""Command-line entry point: ``aahead <subcommand> ...``.

Exit codes: 0 success, 2 usage or invalid input, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import stat_test as st
from .checkpoint import load_checkpoint, save_checkpoint
from .detector import ConfigError, TrainConfig, TrainingDiverged, detect, train
from .evaluation import (Detection, metrics_at_threshold, pr_curve, read_pr_csv, write_pr_csv)
from .formats import FormatError, canonical_json, read_image, read_json, write_image, write_json
from .gradcheck import FRAGMENTS, check_fragment
from .synth import SceneSpec, SpecError, add_gaussian_noise, generate_dataset, load_dataset, subset
from .tensor_nn import ShapeError

logger = logging.getLogger("aahead")

HISTORY_FIELDS = ["epoch", "train_loss", "val_f1", "val_ap"]
METRICS_FIELDS = ["dataset", "checkpoint", "threshold", "f1", "ap", "ap_s", "precision", "recall", "fa_per_image"]


class UsageError(Exception):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _fraction(text):
    value = float(text)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return value


def _non_negative(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return value


def _load_json_arg(path, what):
    try:
        return read_json(path)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


# ----------------------------------------------------------------------------
# generate / noise / subset
# ----------------------------------------------------------------------------


def cmd_generate(args):
    spec = SceneSpec() if args.spec is None else SceneSpec.from_dict(_load_json_arg(args.spec, "spec"))
    generate_dataset(spec, args.count, args.seed, args.out)
    print(Path(args.out) / "manifest.json")


def cmd_noise(args):
    add_gaussian_noise(args.data, args.sigma, args.seed, args.out)
    print(Path(args.out) / "manifest.json")


def cmd_subset(args):
    try:
        subset(args.data, args.fraction, args.seed, args.out, exclude=args.exclude or ())
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise UsageError(str(exc)) from None
    print(Path(args.out) / "manifest.json")


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------


def _load_split(path, what):
    samples = load_dataset(path)
    if not samples:
        raise UsageError(f"{what} dataset {path} is empty")
    return samples


def cmd_train(args):
    raw = {} if args.config is None else _load_json_arg(args.config, "config")
    config = TrainConfig.from_dict(raw)
    train_set = _load_split(args.data, "training")
    val_set = _load_split(args.val, "validation")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo.json").write_text(canonical_json(config.to_dict()))
    history_path = out / "history.csv"
    with open(history_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        fh.flush()

        def on_epoch(row, result):
            writer.writerow({k: repr(float(row[k])) if k != "epoch" else row[k] for k in HISTORY_FIELDS})
            fh.flush()
            if result.best_epoch == row["epoch"]:
                save_checkpoint(out / "best.ckpt", result.model, config, result.best_epoch, result.best_val_f1)

        result = train(train_set, val_set, config, on_epoch=on_epoch)
    if result.best_epoch == 0:  # no epochs: keep the initial weights
        save_checkpoint(out / "best.ckpt", result.model, config, 0, result.best_val_f1)
    print(out / "best.ckpt")


# ----------------------------------------------------------------------------
# eval / score
# ----------------------------------------------------------------------------


def read_predictions(source, n_images: int) -> list[list[Detection]]:
    """Predictions JSON: ``{"predictions": [[[x, y, w, h, score], ...], ...]}``, one list per image."""
    try:
        doc = json.load(sys.stdin) if str(source) == "-" else read_json(source)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read predictions {source}: {exc}") from None
    lists = doc.get("predictions") if isinstance(doc, dict) else None
    if not isinstance(lists, list) or len(lists) != n_images:
        raise UsageError(f"predictions must hold one list per image ({n_images} images)")
    try:
        return [[Detection(*map(float, d)) for d in dets] for dets in lists]
    except TypeError:
        raise UsageError("each prediction must be [x, y, w, h, score]") from None


def write_predictions(path, preds) -> None:
    write_json(path, {"predictions": [[[d.x, d.y, d.w, d.h, d.score] for d in dets] for dets in preds]})


def _fmt(v):
    return "" if v is None else repr(float(v))


def cmd_eval(args):
    samples = load_dataset(args.data)
    if not samples:
        raise UsageError(f"test dataset {args.data} is empty")
    gts = [s.boxes for s in samples]
    if args.predictions is not None:
        preds = read_predictions(args.predictions, len(samples))
        source = str(args.predictions)
    else:
        model, info = load_checkpoint(args.checkpoint)
        images = np.stack([s.image for s in samples])
        preds = detect(model, images, score_threshold=0.0, nms_iou=info.config.nms_iou)
        source = str(args.checkpoint)
    report = metrics_at_threshold(preds, gts, args.threshold, args.iou_min)
    row = {"dataset": str(args.data), "checkpoint": source, "threshold": repr(float(args.threshold)),
           "f1": _fmt(report.f1), "ap": _fmt(report.ap), "ap_s": _fmt(report.ap_small),
           "precision": _fmt(report.precision), "recall": _fmt(report.recall),
           "fa_per_image": _fmt(report.fa_per_image)}
    if args.report:
        with open(args.report, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, lineterminator="\n")
            writer.writeheader()
            writer.writerow(row)
    if args.pr and any(gts):
        write_pr_csv(pr_curve(preds, gts, args.iou_min), args.pr)
    print(",".join(METRICS_FIELDS))
    print(",".join(row[k] for k in METRICS_FIELDS))


def cmd_score(args):
    model, _ = load_checkpoint(args.checkpoint)
    try:
        image = read_image(args.image)
    except FileNotFoundError:
        raise UsageError(f"image not found: {args.image}") from None
    if image.ndim != 2:
        raise UsageError(f"expected a 2-D image, got shape {image.shape}")
    obj, _, (_, _, hcache) = model.forward(image, training=False)
    write_image(f"{args.out}.objectness.img", obj[0])
    print(f"{args.out}.objectness.img")
    if hcache.significance is not None:
        write_image(f"{args.out}.significance.img", hcache.significance.values[0])
        print(f"{args.out}.significance.img")
    else:
        logger.warning("baseline head has no significance map; only objectness written")


# ----------------------------------------------------------------------------
# fwer / gradcheck / plot
# ----------------------------------------------------------------------------


def cmd_fwer(args):
    try:
        spec = st.FwerSpec(args.alpha, args.n, args.correction)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.trials < 1000:
        raise UsageError(f"--trials must be at least 1000, got {args.trials}")
    theta = st.fwer_threshold(spec)
    if args.measure == "sum":
        model = st.ExponentialShared(1.0, args.c)
    elif args.measure == "min":
        model = st.ExponentialPerChannel(np.ones(args.c))
    else:
        model = st.GaussianStandardized(np.zeros(args.c), np.ones(args.c))
    est = st.empirical_fwer(model, args.measure, theta, 1, args.n, trials=args.trials, seed=args.seed)
    if args.header:
        print("alpha,N,correction,theta,empirical_rate,ci_low,ci_high")
    print(",".join([repr(args.alpha), str(args.n), spec.correction.value, repr(theta), repr(est.rate),
                    repr(est.ci_low), repr(est.ci_high)]))


def cmd_gradcheck(args):
    failed = 0
    for name in args.only or FRAGMENTS:
        worst = None
        for seed in range(args.seed, args.seed + args.seeds):
            rep = check_fragment(name, seed, args.tol)
            if worst is None or not rep.passed or rep.max_rel_error > worst.max_rel_error:
                worst = rep
            if not rep.passed:
                break
        failed += not worst.passed
        print(worst)
    if failed:
        raise RuntimeError(f"{failed} fragment(s) failed the gradient check")


def pr_svg(curve, size: int = 400, margin: int = 50) -> str:
    """Self-contained SVG: unit axes, the curve as one polyline, threshold labels."""
    span = size - 2 * margin

    def xy(recall, precision):
        return margin + recall * span, size - margin - precision * span

    pts = sorted(curve, key=lambda p: (p.recall, -p.precision))
    poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(p.recall, p.precision) for p in pts))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" y2="{size - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" stroke="black"/>',
    ]
    for t in (0.0, 0.5, 1.0):
        x, _ = xy(t, 0)
        _, y = xy(0, t)
        parts.append(f'<text x="{x:.1f}" y="{size - margin + 16}" font-size="11" text-anchor="middle">{t:g}</text>')
        parts.append(f'<text x="{margin - 6}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{t:g}</text>')
    parts.append(f'<text x="{size / 2}" y="{size - 12}" font-size="12" text-anchor="middle">recall</text>')
    parts.append(f'<text x="14" y="{size / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {size / 2})">precision</text>')
    parts.append(f'<polyline points="{poly}" fill="none" stroke="steelblue" stroke-width="2"/>')
    step = max(1, math.ceil(len(pts) / 6))
    for p in pts[::step]:
        x, y = xy(p.recall, p.precision)
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2" fill="steelblue"/>')
        parts.append(f'<text x="{x + 4:.2f}" y="{y - 4:.2f}" font-size="9">t={p.threshold:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args):
    try:
        curve = read_pr_csv(args.pr)
    except FileNotFoundError:
        raise UsageError(f"PR file not found: {args.pr}") from None
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{args.pr} is not a threshold,precision,recall CSV: {exc}") from None
    if not curve:
        raise UsageError(f"{args.pr} has no points")
    Path(args.out).write_text(pr_svg(curve))
    print(args.out)


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aahead", description="Anomaly-aware small-target detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--spec", help="scene spec JSON (default: built-in spec)")
    p.add_argument("--count", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config", help="train config JSON (default: built-in recipe)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a predictions file on a dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="predictions JSON, or - for stdin")
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.1)
    p.add_argument("--iou-min", type=float, default=0.05)
    p.add_argument("--report", help="metrics CSV output")
    p.add_argument("--pr", help="PR curve CSV output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="dump objectness and significance maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("fwer", help="threshold for a family-wise error rate and its Monte Carlo check")
    p.add_argument("--c", type=_positive_int, default=8)
    p.add_argument("--n", type=_positive_int, default=4096)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--correction", choices=["sidak", "bonferroni"], default="sidak")
    p.add_argument("--measure", choices=[m.value for m in st.Measure], default="sum")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--header", action="store_true", help="print the CSV header first")
    p.set_defaults(func=cmd_fwer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=_positive_int, default=1, help="number of consecutive seeds")
    p.add_argument("--tol", type=float, default=None, help="override every fragment's tolerance")
    p.add_argument("--only", nargs="+", choices=list(FRAGMENTS), help="restrict to these fragments")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("noise", help="add Gaussian pixel noise to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--sigma", type=_non_negative, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("subset", help="sample a fraction of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=_fraction, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude", nargs="*", help="subset directories whose samples are not eligible")
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("plot", help="render a PR curve CSV as SVG")
    p.add_argument("--pr", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


USAGE_ERRORS = (UsageError, ConfigError, SpecError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except USAGE_ERRORS as exc:
        print(f"aahead {args.command}: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"aahead {args.command}: training aborted: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ShapeError, OSError, RuntimeError, ValueError) as exc:
        print(f"aahead {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
