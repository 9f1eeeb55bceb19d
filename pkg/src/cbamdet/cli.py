"""Command line front end: synth | train | eval | detect."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import RunConfig, config_keys, load_config
from .dataio import (
    DatasetManifest,
    draw_detections,
    load_image,
    load_split,
    save_image,
    write_synth_dataset,
)
from .evaluation import EVAL_CONF_THRESH, evaluate, write_report
from .model import build_model, load_checkpoint
from .postprocess import postprocess
from .tensor import Tensor, no_grad
from .trainer import train

ENV_THREADS = "CBAM_DETECT_THREADS"


def _effective_threads(cfg: RunConfig) -> int:
    threads = cfg.threads
    cap = os.environ.get(ENV_THREADS)
    if cap:
        threads = min(threads, max(1, int(cap)))
    return threads


def build_parser() -> argparse.ArgumentParser:
    epilog = (
        "config file keys (flat YAML, overridden by flags):\n  "
        + "\n  ".join(config_keys())
    )
    parser = argparse.ArgumentParser(
        prog="cbamdet",
        description="Miniature attention-augmented bird detector pipeline.",
        epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, sizing=False, thresholds=False):
        p.add_argument("--config", type=Path, default=None,
                       help="flat YAML config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        if sizing:
            p.add_argument("--input-size", type=int, default=None,
                           help="model input resolution (multiple of 32)")
            p.add_argument("--no-cbam", action="store_true",
                           help="build the ablation model without attention")
        if thresholds:
            p.add_argument("--conf-thresh", type=float, default=None,
                           help="confidence threshold")
            p.add_argument("--iou-thresh", type=float, default=None,
                           help="suppression overlap threshold")

    p_synth = sub.add_parser("synth", help="render a synthetic dataset",
                             description="Render images, labels, and a "
                                         "manifest into the data directory.")
    common(p_synth)

    p_train = sub.add_parser("train", help="train from a dataset directory")
    common(p_train, sizing=True)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a split")
    common(p_eval, thresholds=True)
    p_eval.add_argument("checkpoint", type=Path)
    p_eval.add_argument("--split", choices=("train", "val", "test"),
                        default="val")

    p_detect = sub.add_parser("detect", help="run detection on image files")
    common(p_detect, thresholds=True)
    p_detect.add_argument("checkpoint", type=Path)
    p_detect.add_argument("images", type=Path, nargs="+")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {"seed": getattr(args, "seed", None)}
    if getattr(args, "input_size", None) is not None:
        overrides["input_size"] = args.input_size
    if getattr(args, "no_cbam", False):
        overrides["cbam"] = False
    if getattr(args, "conf_thresh", None) is not None:
        overrides["conf_thresh"] = args.conf_thresh
    if getattr(args, "iou_thresh", None) is not None:
        overrides["iou_thresh"] = args.iou_thresh
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    return load_config(args.config, overrides)


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out) if args.out is not None else Path(cfg.data_dir)
    manifest = write_synth_dataset(cfg.synth_config(), cfg.n_images, out,
                                   force=args.force,
                                   threads=_effective_threads(cfg))
    counts = manifest.counts()
    print(f"wrote {cfg.n_images} images to {out} "
          f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    data_dir = Path(cfg.data_dir)
    manifest = DatasetManifest.load(data_dir / "manifest.json")
    model = build_model(cfg.model_config(), seed=cfg.seed)
    run = train(model, manifest, cfg.hyper_params(), root=data_dir,
                out_dir=cfg.out_dir, log_fn=print,
                threads=_effective_threads(cfg))
    print(f"best val_map50={run.best_map50:.6f} at epoch {run.best_epoch} "
          f"({run.best_path})")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    model = load_checkpoint(args.checkpoint)
    data_dir = Path(cfg.data_dir)
    manifest = DatasetManifest.load(data_dir / "manifest.json")
    pairs = load_split(data_dir, manifest, args.split,
                       model.cfg.input_size, model.cfg.num_classes,
                       threads=_effective_threads(cfg))
    conf = args.conf_thresh if args.conf_thresh is not None else EVAL_CONF_THRESH
    report = evaluate(model, pairs, conf_thresh=conf, nms_iou=cfg.iou_thresh)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir)
    print(report.to_text(), end="")
    return 0


def cmd_detect(args) -> int:
    cfg = _config_from_args(args)
    model = load_checkpoint(args.checkpoint)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = load_image(path, model.cfg.input_size)
        with no_grad():
            preds = model(Tensor(image.data[None]))
        (dets,) = postprocess(preds, model.cfg, cfg.conf_thresh, cfg.iou_thresh)
        lines = [
            f"{d.class_id} {d.confidence:.6f} "
            f"{d.box.x1:.2f} {d.box.y1:.2f} {d.box.x2:.2f} {d.box.y2:.2f}"
            for d in dets
        ]
        stem = Path(path).stem
        (out_dir / f"{stem}_det.txt").write_text(
            "\n".join(lines) + ("\n" if lines else "")
        )
        save_image(out_dir / f"{stem}_det.png", draw_detections(image, dets))
        print(f"{path}: {len(dets)} detections")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "eval": cmd_eval,
        "detect": cmd_detect,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, TypeError, FileNotFoundError, RuntimeError,
            ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
