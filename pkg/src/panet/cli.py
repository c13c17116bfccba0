"""Command line entry point: ``panet <command>``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .tensor import ConfigurationError, ContractViolation

log = logging.getLogger("panet")


def _config(args):
    from .harness.config import TrainConfig, parse_overrides

    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    values = parse_overrides(text.splitlines())
    values.update(parse_overrides(args.set or []))
    return TrainConfig(**values)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    from .harness.plotting import plot_loss_curves
    from .harness.train import train

    cfg = _config(args)
    out = _out_dir(args.out)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    result = train(cfg, out, progress=not args.quiet)
    plot_loss_curves(result.rows, out / "loss_curves.png")
    print(f"trained {cfg.steps} steps in {result.seconds:.1f}s -> {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    from .harness.checkpoint import load_checkpoint
    from .harness.evaluate import evaluate, write_report
    from .harness.plotting import plot_eval_histogram
    from .harness.train import eval_scenes

    model, cfg = load_checkpoint(args.checkpoint)
    if args.scenes:
        cfg = cfg.replace(eval_scenes=args.scenes)
    out = _out_dir(args.out)
    report = evaluate(model, eval_scenes(cfg), cfg.seed)
    write_report(report, out / "eval.csv")
    plot_eval_histogram(report, out / "eval_iou.png")
    print(f"mask_iou={report.mean_mask_iou:.4f} box_iou={report.mean_box_iou:.4f} accuracy={report.accuracy:.4f}")
    return 0


def cmd_stats(args) -> int:
    from .harness.checkpoint import load_checkpoint
    from .harness.plotting import plot_source_ratios
    from .harness.stats import pooling_source_stats
    from .harness.train import eval_scenes
    from .roi import write_stats_csv

    model, cfg = load_checkpoint(args.checkpoint)
    if args.scenes:
        cfg = cfg.replace(eval_scenes=args.scenes)
    out = _out_dir(args.out)
    stats = pooling_source_stats(model, eval_scenes(cfg), cfg.seed)
    write_stats_csv(stats, out / "source_ratios.csv")
    plot_source_ratios(stats, out / "source_ratios.png")
    for s in stats:
        print(f"assigned level {s.group}: {s.off_level_fraction():.1%} of {s.total} features from other levels")
    return 0


def cmd_gradcheck(args) -> int:
    from .harness.gradsuite import run_gradient_suite

    reports, seconds = run_gradient_suite(args.seed, progress=print)
    if args.out:
        out = _out_dir(args.out)
        with open(out / "gradcheck.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["check", "passed", "max_rel_error", "entries"])
            for r in reports:
                writer.writerow([r.name, int(r.passed), f"{r.max_rel_error:.3e}", r.n_checked])
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed in {seconds:.1f}s")
    return 1 if failed else 0


def cmd_anchors(args) -> int:
    from .harness.anchors import generate_anchors

    scales = [float(v) ** 2 for v in args.sides.split(",")] if args.sides else None
    ratios = [float(v) for v in args.ratios.split(",")] if args.ratios else None
    anchors = generate_anchors(args.preset, scales, ratios)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["scale", "aspect_ratio", "width", "height"])
    s = np.repeat(anchors.scales, len(anchors.aspect_ratios))
    r = np.tile(anchors.aspect_ratios, len(anchors.scales))
    for (w, h), sc, ra in zip(anchors.anchors, s, r):
        writer.writerow([f"{sc:g}", f"{ra:g}", f"{w:.6f}", f"{h:.6f}"])
    return 0


def _write_ppm(image: np.ndarray, path: Path) -> None:
    rgb = (np.clip(image.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def cmd_shapes(args) -> int:
    from .harness.data import generate_synthetic_scene
    from .harness.plotting import plot_scenes

    out = _out_dir(args.dump)
    scenes = [generate_synthetic_scene(args.seed + i, args.size, args.size, args.max_instances) for i in range(args.count)]
    if args.format == "ppm":
        for i, scene in enumerate(scenes):
            _write_ppm(scene.image, out / f"scene_{i:03d}.ppm")
    else:
        plot_scenes(scenes, out / "scenes.png")
    with open(out / "instances.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scene", "class_id", "x0", "y0", "x1", "y1", "area"])
        for i, scene in enumerate(scenes):
            for inst in scene.instances:
                writer.writerow([i, inst.class_id, *(f"{v:g}" for v in inst.box), int(inst.mask.sum())])
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panet", description="Path-aggregation detector on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = sub.add_parser("train", help="train from scratch; writes metrics.csv, model.pank, loss_curves.png")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    for name, func, what in (("eval", cmd_eval, "eval.csv and eval_iou.png"), ("stats", cmd_stats, "source_ratios.csv and .png")):
        p = sub.add_parser(name, help=f"score a checkpoint on held-out scenes; writes {what}")
        p.add_argument("checkpoint")
        p.add_argument("--out", required=True)
        p.add_argument("--scenes", type=int, help="number of held-out scenes (default from the checkpoint config)")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("anchors", help="print an anchor preset as CSV")
    p.add_argument("--preset", choices=("mvd", "cityscapes", "custom"), default="mvd")
    p.add_argument("--sides", help="custom preset: comma-separated anchor sides (scale = side^2)")
    p.add_argument("--ratios", help="custom preset: comma-separated aspect ratios")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("shapes", help="dump synthetic scene previews")
    p.add_argument("--dump", required=True, metavar="DIR")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.set_defaults(func=cmd_shapes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
