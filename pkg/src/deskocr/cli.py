"""Command-line entry point.

    deskocr <command> [--config FILE] [--set key=value ...] [options]

Commands: gen-data, train-det, train-rec, pretrain-rotnet, mine-uim,
eval-det, eval-rec, eval-e2e. Exit codes: 0 success, 1 config error,
2 data error, 64 unknown command / bad usage.
"""

import argparse
import json
import os
import sys
import time

from .errors import (CheckpointError, ConfigError, DataError, DeskOCRError,
                     ShapeError)

USAGE = __doc__

COMMANDS = ("gen-data", "train-det", "train-rec", "pretrain-rotnet",
            "mine-uim", "eval-det", "eval-rec", "eval-e2e")


def _common(parser: argparse.ArgumentParser, task: str):
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--set", dest="sets", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override")
    parser.add_argument("--out", default=None, help="output directory")
    parser.set_defaults(task=task)


def _build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="deskocr", description=USAGE)
    sub = root.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    _common(p, task=None)
    p.add_argument("--task", choices=("det", "rec"), default="det")

    p = sub.add_parser("train-det", help="train a DB-style detector")
    _common(p, "det")
    p.add_argument("--neck", choices=("fpn", "rse_fpn", "lk_pan"), default=None)
    p.add_argument("--dml-pair", action="store_true",
                   help="train two peers with mutual learning")
    p.add_argument("--cml", metavar="TEACHER_CKPT", default=None,
                   help="collaborative mutual learning against a frozen teacher")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("train-rec", help="train an SVTR-LCNet-style recognizer")
    _common(p, "rec")
    p.add_argument("--variant", default=None)
    p.add_argument("--gtc", action="store_true", help="enable the attention guide branch")
    p.add_argument("--no-gtc", action="store_true", help="disable the attention guide branch")
    p.add_argument("--conaug", action="store_true", help="enable TextConAug")
    p.add_argument("--udml", action="store_true", help="train two peers with U-DML")
    p.add_argument("--init-from-rotnet", metavar="CKPT", default=None)
    p.add_argument("--extra-data", metavar="MANIFEST", default=None,
                   help="rec manifest of mined lines to append to training data")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("pretrain-rotnet", help="self-supervised rotation pretraining")
    _common(p, "rotnet")
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("mine-uim", help="pseudo-label unlabeled line images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", nargs="+", required=True, help="P5 image paths")
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--conf-thresh", type=float, default=0.95)

    p = sub.add_parser("eval-det", help="Hmean between two det manifests")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=float, default=0.5)

    p = sub.add_parser("eval-rec", help="sentence accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("eval-e2e", help="detect -> rectify -> recognize -> Hmean")
    p.add_argument("--det-ckpt", required=True)
    p.add_argument("--rec-ckpt", required=True)
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--gt", required=True, help="det manifest with transcripts")
    p.add_argument("--out", default=None)
    p.add_argument("--iou", type=float, default=0.5)
    return root


def _load_cfg(args, task: str):
    from .config import apply_override, load_config
    cfg = load_config(task, args.config, args.sets)
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    if getattr(args, "epochs", None) is not None:
        cfg["epochs"] = args.epochs
    return cfg


def _summary(cfg, result: dict, wall: float):
    """Print the summary and persist it; wall time stays out of metrics.jsonl
    so identical runs produce identical metrics files."""
    result = dict(result, wall_time_s=round(wall, 3))
    out_dir = cfg.get("out_dir") if isinstance(cfg, dict) else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(result, fh, sort_keys=True, indent=2)
    print(json.dumps(result, sort_keys=True))


def _dispatch(args) -> int:
    from . import pipeline, trainers
    t0 = time.time()
    cmd = args.command
    if cmd == "gen-data":
        gen_task = args.task or "det"
        cfg = _load_cfg(args, gen_task)
        _summary(cfg, pipeline.gen_data(cfg), time.time() - t0)
    elif cmd == "train-det":
        cfg = _load_cfg(args, "det")
        if "train" not in cfg:
            cfg["train"] = {"mode": "plain", "teacher_ckpt": None}
        if args.neck:
            cfg["model"]["neck"] = args.neck
        if args.dml_pair:
            cfg["train"]["mode"] = "dml"
        if args.cml:
            cfg["train"]["mode"] = "cml"
            cfg["train"]["teacher_ckpt"] = args.cml
        _summary(cfg, trainers.train_det(cfg), time.time() - t0)
    elif cmd == "train-rec":
        cfg = _load_cfg(args, "rec")
        if args.variant:
            cfg["model"]["variant"] = args.variant
        if args.gtc:
            cfg["model"]["gtc_enabled"] = True
        if args.no_gtc:
            cfg["model"]["gtc_enabled"] = False
        if args.conaug:
            cfg["train"]["conaug"] = True
        if args.udml:
            cfg["train"]["udml"] = True
        if args.init_from_rotnet:
            cfg["train"]["init_from"] = args.init_from_rotnet
        if args.extra_data:
            cfg["train"]["extra_data"] = args.extra_data
        _summary(cfg, trainers.train_rec(cfg), time.time() - t0)
    elif cmd == "pretrain-rotnet":
        cfg = _load_cfg(args, "rotnet")
        _summary(cfg, trainers.run_pretrain_rotnet(cfg), time.time() - t0)
    elif cmd == "mine-uim":
        result = trainers.run_mine_uim(args.ckpt, args.images,
                                       args.out_manifest, args.conf_thresh)
        print(json.dumps(result, sort_keys=True))
    elif cmd == "eval-det":
        print(json.dumps(pipeline.eval_det_files(args.pred, args.gt, args.iou),
                         sort_keys=True))
    elif cmd == "eval-rec":
        print(json.dumps(pipeline.eval_rec_files(args.ckpt, args.manifest),
                         sort_keys=True))
    elif cmd == "eval-e2e":
        print(json.dumps(pipeline.run_e2e(args.det_ckpt, args.rec_ckpt,
                                          args.images, args.gt,
                                          out_dir=args.out, iou_thresh=args.iou),
                         sort_keys=True))
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0
    if argv[0] not in COMMANDS:
        sys.stderr.write(f"deskocr: unknown command {argv[0]!r}\n{USAGE}")
        return 64
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 64 if e.code else 0
    try:
        return _dispatch(args)
    except ConfigError as e:
        sys.stderr.write(f"deskocr: config error: {e}\n")
        return 1
    except (DataError, CheckpointError, ShapeError, OSError) as e:
        sys.stderr.write(f"deskocr: data error: {e}\n")
        return 2
    except DeskOCRError as e:
        sys.stderr.write(f"deskocr: error: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
