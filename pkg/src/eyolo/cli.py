"""Command-line entry point: synth, train, detect, eval, bench, export."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data, plotting
from .checkpoint import CheckpointError
from .geometry import NmsConfig, format_detections, parse_detections
from .loss import LossConfig
from .net import ConfigError, NetConfig, Network, build_network, preset
from .train import TrainConfig, bench_speed, detect, evaluate_iou, fit, read_loss_csv

DATA_ENV = "EYOLO_DATA"
DEFAULT_BATCH = {"tiny": 4, "full": 8}

log = logging.getLogger("eyolo")


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_model(p: argparse.ArgumentParser, ckpt_required: bool = False) -> None:
    p.add_argument("--preset", choices=("tiny", "full"), default="tiny", help="network preset")
    p.add_argument("--config", type=Path, help="network config file (overrides --preset)")
    p.add_argument("--ckpt", type=Path, required=ckpt_required, help="weight checkpoint")


def _add_nms(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iou-3d", type=float, default=0.35, help="3D IoU suppression threshold")
    p.add_argument("--iou-2d", type=float, default=0.5, help="2D IoU threshold (two-view baseline)")
    p.add_argument("--conf-floor", type=float, default=0.5, help="minimum confidence kept before NMS")
    p.add_argument("--per-class", action="store_true", help="suppress only within a class")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--data",
        type=Path,
        default=os.environ.get(DATA_ENV),
        help=f"dataset root with manifest.txt (default: ${DATA_ENV})",
    )


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="eyolo", description="RGB-D 3D box detector on a 3D grid", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cuboid dataset", formatter_class=fmt)
    p.add_argument("--out", type=Path, default=os.environ.get(DATA_ENV), help=f"output root (default: ${DATA_ENV})")
    p.add_argument("--scenes", type=int, default=16, help="number of scenes")
    p.add_argument("--objects", type=int, default=3, help="maximum objects per scene (1..5)")
    p.add_argument("--image-size", type=int, default=128, help="image side in pixels")
    p.add_argument("--person-fraction", type=float, default=0.5, help="share of person-shaped objects")
    _add_common(p)

    p = sub.add_parser("train", help="train on a dataset", formatter_class=fmt)
    _add_data(p)
    _add_model(p)
    p.add_argument("--out", type=Path, default=Path("runs/train"), help="output directory")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--batch-size", type=int, help="batch size (default: 4 tiny, 8 full)")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--lambda-coord", type=float, default=1.0, help="weight of box and object-confidence terms")
    p.add_argument("--lambda-noobj", type=float, default=10.0, help="weight of the empty-cell confidence term")
    p.add_argument("--val-fraction", type=float, default=0.08, help="share of samples held out for validation")
    p.add_argument("--resume", type=Path, help="continue from a last.ckpt")
    _add_common(p)

    p = sub.add_parser("detect", help="run detection on sample directories", formatter_class=fmt)
    p.add_argument("--image", type=Path, nargs="+", required=True, help="sample directory (color/depth/labels)")
    _add_model(p, ckpt_required=True)
    _add_nms(p)
    p.add_argument("--out", type=Path, help="detection text file (default: stdout); one file per sample if several")
    p.add_argument("--ply", type=Path, help="PLY output (cloud + ground truth red + detections yellow)")
    _add_common(p)

    p = sub.add_parser("eval", help="IoU report over a dataset", formatter_class=fmt)
    _add_data(p)
    _add_model(p)
    _add_nms(p)
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself (pipeline self-test)")
    p.add_argument("--report-dir", type=Path, help="write per-match CSV and histogram figure here")
    _add_common(p)

    p = sub.add_parser("bench", help="detection speed and NMS timing", formatter_class=fmt)
    _add_model(p)
    _add_nms(p)
    p.add_argument("--iterations", type=int, default=10, help="timed repetitions (median reported)")
    p.add_argument("--candidates", type=int, default=300, help="boxes per NMS timing set")
    p.add_argument("--out-dir", type=Path, help="write bench CSV and figure here")
    _add_common(p)

    p = sub.add_parser("export", help="write a sample and detections as PLY", formatter_class=fmt)
    p.add_argument("--sample", type=Path, required=True, help="sample directory")
    p.add_argument("--detections", type=Path, help="detection text file")
    p.add_argument("--out", type=Path, required=True, help="PLY output path")
    p.add_argument("--intrinsics", type=float, nargs=4, metavar=("FX", "FY", "CX", "CY"), help="pinhole intrinsics (default: image size, centre)")
    p.add_argument("--no-ground-truth", action="store_true", help="omit the red ground-truth boxes")
    _add_common(p)
    return parser


def _nms(args) -> NmsConfig:
    return NmsConfig(args.iou_3d, args.iou_2d, args.conf_floor, class_agnostic=not args.per_class)


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} not given")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


def _net_config(args) -> NetConfig:
    if args.config is not None:
        return NetConfig.load(_require(args.config, "network config"))
    if getattr(args, "ckpt", None) is not None:
        beside = Path(args.ckpt).parent / "net.cfg"
        if beside.is_file():
            return NetConfig.load(beside)
    return preset(args.preset)


def _load_net(args, required: bool = True) -> Optional[Network]:
    cfg = _net_config(args)
    if args.ckpt is None:
        if required:
            raise UsageError("--ckpt is required")
        return build_network(cfg, args.seed)
    net, _ = Network.load(_require(args.ckpt, "checkpoint"), cfg)
    return net


def cmd_synth(args) -> int:
    out = args.out
    if out is None:
        raise UsageError(f"--out not given and ${DATA_ENV} unset")
    spec = data.SceneSpec(args.seed, args.objects, data.DEPTH_RANGE_M, args.image_size, args.person_fraction)
    records = data.generate_synthetic(spec, out, args.scenes)
    print(f"wrote {len(records)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    root = _require(args.data, "dataset")
    cfg = _net_config(args)
    samples = data.load_dataset(root, cfg.input_size)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * args.val_fraction)) if len(samples) > 1 else 0
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    resume = _require(args.resume, "resume checkpoint") if args.resume else None

    net = build_network(cfg, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "net.cfg")
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size or DEFAULT_BATCH.get(cfg.preset, 4),
        lr=args.lr,
        seed=args.seed,
        loss=LossConfig(args.lambda_coord, args.lambda_noobj),
    )
    result = fit(net, train, val, tcfg, args.out, resume=resume)
    history = result.history
    plotting.plot_loss_curve(read_loss_csv(args.out / "loss.csv"), args.out / "loss.png")
    first, last = history[0], history[-1]
    print(f"trained {len(history)} epochs ({result.steps} steps): train loss {first[1]:.4f} -> {last[1]:.4f}")
    print(f"loss curve: {args.out / 'loss.csv'}  best checkpoint: {result.best_checkpoint}")
    return 0


def cmd_detect(args) -> int:
    dirs = [_require(p, "sample directory") for p in args.image]
    net = _load_net(args)
    nms_cfg = _nms(args)
    for n, sample_dir in enumerate(dirs):
        sample = data.load_sample(sample_dir, net.cfg.input_size)
        boxes = detect(net, sample.input.data, nms_cfg)[0]
        text = format_detections(boxes)
        if args.out is None:
            sys.stdout.write(text)
        else:
            target = args.out if len(dirs) == 1 else args.out.parent / f"{sample.id}_{args.out.name}"
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text)
        if args.ply is not None:
            ply = args.ply if len(dirs) == 1 else args.ply.parent / f"{sample.id}_{args.ply.name}"
            data.export_ply(sample, boxes, out_path=ply, ground_truth=sample.boxes)
        log.info("%s: %d detections", sample.id, len(boxes))
    return 0


def cmd_eval(args) -> int:
    root = _require(args.data, "dataset")
    cfg = _net_config(args)
    net = None if args.oracle else _load_net(args)
    samples = data.load_dataset(root, cfg.input_size)
    report = evaluate_iou(net, samples, _nms(args), oracle=args.oracle)
    print(report.table())
    if args.report_dir is not None:
        args.report_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.report_dir / "eval.csv")
        plotting.plot_iou_histogram(report, args.report_dir / "eval_iou.png")
    return 0


def cmd_bench(args) -> int:
    net = _load_net(args, required=False)
    report = bench_speed(net, args.iterations, _nms(args), args.candidates, args.seed)
    print(report.table())
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out_dir / "bench.csv")
        plotting.plot_bench(report, args.out_dir / "bench.png")
    return 0


def cmd_export(args) -> int:
    sample = data.load_sample(_require(args.sample, "sample directory"))
    dets = []
    if args.detections is not None:
        dets = parse_detections(_require(args.detections, "detection file").read_text())
    gt = None if args.no_ground_truth else sample.boxes
    out = data.export_ply(sample, dets, tuple(args.intrinsics) if args.intrinsics else None, args.out, ground_truth=gt)
    print(f"wrote {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export": cmd_export,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(args.seed)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"eyolo {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ConfigError, CheckpointError, RuntimeError) as exc:
        print(f"eyolo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
