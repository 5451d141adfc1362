"""Command-line entry point: ``rundet <command> ...``.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys

import numpy as np

from . import __version__, config as config_mod
from . import kernels, pipeline
from .boxes import Detection, box_in_box_rate, read_detections, write_detections
from .evalkit import benchmark_fps, evaluate, run_detector
from .shapesdata import CANVAS, DatasetError, generate_dataset, load_dataset, render_sample

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

STAGES = ("baseline", "2way", "3way", "e2e3way")
OVERLAY_COLORS = {1: (255, 64, 64), 2: (64, 255, 64), 3: (64, 128, 255)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _provenance(out, cfg=None, **extra):
    """Make ``out`` self-describing: resolved config plus versions and seeds."""
    os.makedirs(out, exist_ok=True)
    info = {"rundet": __version__, "numpy": np.__version__, "python": platform.python_version(),
            "kernels": kernels.BACKEND, "argv": sys.argv[1:], **extra}
    if cfg is not None:
        config_mod.save(cfg, os.path.join(out, "config.ini"))
        info["seed"] = cfg.schedule.seed
    with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(path, overrides):
    cfg = config_mod.load(path) if path else config_mod.ExperimentConfig()
    pairs = {}
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        pairs[key.strip()] = value.strip()
    cfg = cfg.replace(**pairs)
    config_mod.validate(cfg)
    return cfg


# --- commands -------------------------------------------------------------------

def cmd_gen_data(args):
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    manifest = generate_dataset(args.n, args.seed, args.out)
    _provenance(args.out, n=args.n, seed=args.seed)
    print(manifest.path)


def _stage_config(cfg, stage):
    if stage == "baseline":
        return cfg.replace(**{"resblock.mode": "none", "head.mode": "separate"})
    if stage == "2way":
        return cfg.replace(**{"resblock.mode": "2way"})
    return cfg.replace(**{"resblock.mode": "3way"})


def cmd_train(args):
    cfg = _stage_config(_load_config(args.config, args.set), args.stage)
    if args.stage == "3way" and not args.resume:
        raise UsageError("stage 3way fine-tunes a 2way checkpoint; pass --resume PATH")
    data = args.data or cfg.data.train
    dataset = load_dataset(data)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "loss.log")
    with open(log_path, "w", encoding="utf-8") as log:
        def log_fn(line):
            log.write(line + "\n")

        if args.stage == "3way":
            stage1 = pipeline.load_checkpoint(args.resume)
            result = pipeline.train_stage2_3way(stage1, cfg, dataset, log_fn)
        else:
            result = pipeline.train_from_scratch(cfg, dataset, log_fn)
    ckpt_path = os.path.join(args.out, f"{args.stage}.ckpt")
    pipeline.save_checkpoint(result.checkpoint, ckpt_path)
    _provenance(args.out, result.model.cfg, stage=args.stage, data=data, resume=args.resume)
    print(ckpt_path)


def _dataset_and_truth(path):
    dataset = load_dataset(path)
    return dataset, dataset.ground_truth()


def _report_block(name, report):
    return [f"[{name}]"] + report.lines() + [""]


def cmd_eval(args):
    if not args.checkpoint and not args.dets:
        raise UsageError("eval needs --checkpoint or --dets")
    dataset, truth = _dataset_and_truth(args.data)
    ecfg = config_mod.EvalConfig()
    os.makedirs(args.out, exist_ok=True)
    lines, runs = [], []
    for path in args.dets or []:
        runs.append((os.path.splitext(os.path.basename(path))[0], None, read_detections(path)))
    for path in args.checkpoint or []:
        ckpt = pipeline.load_checkpoint(path)
        model = pipeline.model_from_checkpoint(ckpt)
        ecfg = model.cfg.eval
        runs.append((ckpt.stage, model, None))
    seen = {}
    for name, model, dets in runs:
        seen[name] = seen.get(name, 0) + 1
        label = name if seen[name] == 1 else f"{name}.{seen[name]}"
        if dets is None:
            dets = run_detector(model, dataset)
            write_detections(os.path.join(args.out, f"{label}.dets"), dets)
            num_classes = model.cfg.head.num_classes
        else:
            num_classes = max([int(c) for _, labels in truth.values() for c in labels] + [1])
        report = evaluate(dets, truth, num_classes, ecfg.iou_threshold, ecfg.small_area,
                          ecfg.medium_area, ecfg.recall_top)
        report.box_in_box = box_in_box_rate(dets, 0.9, ecfg.bib_min_score)
        lines += _report_block(label, report)
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    _provenance(args.out, data=args.data, checkpoints=args.checkpoint or [], dets=args.dets or [])
    print("\n".join(lines).rstrip())


def _read_image(path):
    if path.endswith(".rgb"):
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size != CANVAS * CANVAS * 3:
            raise DatasetError(f"{path}: expected {CANVAS}x{CANVAS}x3 raw bytes, got {raw.size}")
        return raw.reshape(CANVAS, CANVAS, 3)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB").resize((CANVAS, CANVAS)), dtype=np.uint8)


def draw_overlay(pixels, dets, scale=4):
    """Copy of ``pixels`` (H,W,3 uint8), upscaled, with one rectangle per detection."""
    from PIL import Image, ImageDraw

    im = Image.fromarray(pixels).resize((pixels.shape[1] * scale, pixels.shape[0] * scale),
                                        Image.NEAREST)
    draw = ImageDraw.Draw(im)
    w, h = im.size
    for d in dets:
        x1, y1, x2, y2 = d.box
        color = OVERLAY_COLORS.get(d.class_id, (255, 255, 255))
        draw.rectangle([x1 * w, y1 * h, x2 * w - 1, y2 * h - 1], outline=color)
        draw.text((x1 * w + 2, y1 * h + 1), f"{d.class_id}:{d.score:.2f}", fill=color)
    return im


def cmd_detect(args):
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    model = pipeline.model_from_checkpoint(ckpt)
    pixels = _read_image(args.image)
    image = pixels.transpose(2, 0, 1)[None].astype(np.float64) / 255.0
    image_id = os.path.splitext(os.path.basename(args.image))[0]
    dets = [d for d in model.detect(image, [image_id])[0] if d.score >= args.min_score]
    os.makedirs(args.out, exist_ok=True)
    write_detections(os.path.join(args.out, f"{image_id}.dets"), dets)
    draw_overlay(pixels, dets).save(os.path.join(args.out, f"{image_id}.png"))
    _provenance(args.out, model.cfg, checkpoint=args.checkpoint, image=args.image)
    print(f"{len(dets)} detections -> {args.out}")


def cmd_diagnose(args):
    dets = read_detections(args.dets)
    rate = box_in_box_rate(dets, args.containment, args.min_score)
    print(f"box_in_box_rate={rate:.6f}")


def cmd_bench(args):
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    model = pipeline.model_from_checkpoint(ckpt)
    rng = np.random.default_rng(args.seed)
    images = np.stack([render_sample(rng)[0].transpose(2, 0, 1) for _ in range(args.batch)]) / 255.0
    report = benchmark_fps(model, images, args.repeats)
    print(f"backend={kernels.BACKEND}")
    print("\n".join(report.lines()))


# --- entry point ----------------------------------------------------------------

def build_parser():
    p = _Parser(prog="rundet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rundet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector stage")
    t.add_argument("--config")
    t.add_argument("--stage", choices=STAGES, default="2way")
    t.add_argument("--resume", help="2way checkpoint to fine-tune (stage 3way)")
    t.add_argument("--data", help="training set directory (default: data.train)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints or detection dumps")
    e.add_argument("--checkpoint", action="append")
    e.add_argument("--dets", action="append", help="score an existing detection dump")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detect objects in one image")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--min-score", type=float, default=0.3)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)

    q = sub.add_parser("diagnose", help="box-in-box rate of a detection dump")
    q.add_argument("--dets", required=True)
    q.add_argument("--min-score", type=float, default=0.0)
    q.add_argument("--containment", type=float, default=0.9)
    q.set_defaults(func=cmd_diagnose)

    b = sub.add_parser("bench", help="inference latency of a checkpoint")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--repeats", type=int, default=10)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (UsageError, config_mod.ConfigError, pipeline.StageError) as exc:
        print(f"rundet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, pipeline.CheckpointError, ValueError) as exc:
        print(f"rundet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (pipeline.DivergenceError, FloatingPointError) as exc:
        print(f"rundet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
