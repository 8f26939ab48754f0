"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 I/O, 4 audit/validation failure,
5 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import errors as E
from .checkpoint import load_checkpoint
from .config_io import load_config
from .inference import format_report, network_predictor, plan_tiles, report, segment_volume
from .network import Network, param_count, shape_audit
from .spectral import solve_spectral
from .volume_io import LabelRemap, header_for, read_volume, remap_labels, write_volume

log = logging.getLogger("fdfcn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4, 5
COORD_NAMES = ("s1", "s2", "s3", "x", "y", "z")


class UsageError(Exception):
    pass


def _existing(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _parent_dir(path: str) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory does not exist: {parent}")
    return path


def coord_paths(prefix: str) -> list:
    return [f"{prefix}_{name}.nii" for name in COORD_NAMES]


def write_table(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def cmd_audit(args, out) -> int:
    run = load_config(_existing(args.config, "config"))
    total, breakdown = param_count(run.network)
    out.write("stage\tparameters\n")
    for name, count in breakdown.items():
        out.write(f"{name}\t{count}\n")
    out.write(f"total\t{total}\n\n")
    out.write("stage\tshape\n")
    try:
        rows = shape_audit(run.network)
    except E.AuditFailure as exc:
        for r in exc.table:
            out.write(f"{r.name}\t({r.edge}, {r.channels})\n")
        out.write(f"FAILED\t{exc}\n")
        return EXIT_VALIDATION
    for r in rows:
        out.write(f"{r.name}\t({r.edge}, {r.channels})\n")
    return EXIT_OK


def cmd_splits(args, out) -> int:
    from .trainer import cv_splits

    with open(_existing(args.subjects, "subject list")) as fh:
        ids = [line.strip() for line in fh if line.strip() and not line.startswith("#")]
    out.write("fold\trole\tsubject\n")
    for split in cv_splits(ids, args.seed):
        for role in ("train", "val", "test"):
            for s in getattr(split, role):
                out.write(f"{split.fold}\t{role}\t{s}\n")
    return EXIT_OK


def cmd_coords(args, out) -> int:
    _, mask = read_volume(_existing(args.mask, "mask"))
    _parent_dir(args.out_prefix)
    coords = solve_spectral(mask > 0, downsample=args.downsample)
    for path, vol in zip(coord_paths(args.out_prefix), coords.volumes()):
        write_volume(path, vol.astype(np.float32))
    text = coords.report()
    write_table(f"{args.out_prefix}_report.tsv", text)
    out.write(text)
    return EXIT_OK


def cmd_segment(args, out) -> int:
    ckpt_path = _existing(args.checkpoint, "checkpoint")
    image_path = _existing(args.image, "image")
    mask_path = _existing(args.mask, "mask")
    if args.coords:
        for p in coord_paths(args.coords):
            _existing(p, "coordinate volume")
    _parent_dir(args.out)
    ckpt = load_checkpoint(ckpt_path)
    header, image = read_volume(image_path)
    _, mask = read_volume(mask_path)
    if mask.shape != image.shape:
        raise E.ShapeMismatch(f"mask shape {mask.shape} differs from image shape {image.shape}")
    if args.coords:
        coords = np.stack([read_volume(p)[1] for p in coord_paths(args.coords)])
    else:
        coords = solve_spectral(mask > 0).volumes()
    if coords.shape[1:] != image.shape:
        raise E.ShapeMismatch(f"coordinate volumes {coords.shape[1:]} differ from {image.shape}")
    net = Network(ckpt.config)
    cfg = ckpt.config
    intensity = np.asarray(image, np.float32) / 255.0
    plan = plan_tiles(image.shape, cfg.output_edge, cfg.input_edge)
    pred = segment_volume(network_predictor(net, ckpt.params), intensity, coords, plan)
    pred = np.where(mask > 0, pred, 0).astype(np.uint8)
    write_volume(args.out, pred, header_for(pred, header.spacing))
    counts = np.bincount(pred.ravel(), minlength=cfg.classes)
    out.write("class\tvoxels\n")
    for c, n in enumerate(counts):
        out.write(f"{c}\t{int(n)}\n")
    return EXIT_OK


def cmd_metrics(args, out) -> int:
    _, pred = read_volume(_existing(args.pred, "prediction"))
    _, ref = read_volume(_existing(args.ref, "reference"))
    if args.remap:
        ref = remap_labels(ref, LabelRemap.load(_existing(args.remap, "remap table")))
    rows = report(pred.astype(np.int64), ref.astype(np.int64))
    text = format_report(rows)
    out.write(text)
    if args.out:
        _parent_dir(args.out)
        write_table(args.out, text)
        from .plotting import plot_metrics

        plot_metrics(rows, os.path.splitext(args.out)[0] + ".png")
    return EXIT_OK


def cmd_train(args, out) -> int:
    from .plotting import plot_history, plot_metrics
    from .trainer import cv_splits, load_subject, train

    run = load_config(_existing(args.config, "config"))
    data = run.data
    if not data.get("data_dir") or not os.path.isdir(data["data_dir"]):
        raise E.DataMissing(f"data_dir not found: {data.get('data_dir')}")
    remap = LabelRemap.load(data["remap"]) if data.get("remap") else None
    if data.get("train_subjects"):
        train_ids, val_ids, test_ids = list(data["train_subjects"]), list(data["val_subjects"] or []), []
    else:
        splits = cv_splits(data.get("subjects") or [], data.get("split_seed", 0))
        if not 0 <= args.fold < len(splits):
            raise UsageError(f"fold must be in [0, {len(splits) - 1}]")
        split = splits[args.fold]
        train_ids, val_ids, test_ids = split.train, split.val, split.test
    os.makedirs(args.out, exist_ok=True)
    ds = data.get("spectral_downsample", 1)

    def load(ids):
        return [load_subject(data["data_dir"], s, remap, ds) for s in ids]

    best, history = train(load(train_ids), load(val_ids), run.network, run.train, run.sampler,
                          out_dir=args.out)
    plot_history(history, os.path.join(args.out, "history.png"))
    out.write(f"best_epoch\t{best.epoch}\nbest_val_dice\t{best.score:.6f}\n")
    if test_ids:
        net = Network(run.network)
        predict = network_predictor(net, best.params)
        all_rows = []
        for subj in load(test_ids):
            plan = plan_tiles(subj.intensity.shape, run.network.output_edge, run.network.input_edge)
            pred = segment_volume(predict, subj.intensity, subj.coords, plan, run.train.val_batch)
            all_rows.append(report(pred, subj.labels, range(1, run.network.classes)))
        rows = [r._replace(dice=float(np.mean([a[i].dice for a in all_rows])),
                           iou=float(np.mean([a[i].iou for a in all_rows])),
                           empty=all(a[i].empty for a in all_rows))
                for i, r in enumerate(all_rows[0])]
        write_table(os.path.join(args.out, "test_metrics.tsv"), format_report(rows))
        plot_metrics(rows, os.path.join(args.out, "test_metrics.png"), f"fold {args.fold}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdfcn", description="3D brain structure segmentation")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one cross-validation fold")
    s.add_argument("--config", required=True)
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="label a volume with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--coords", default=None, help="prefix of precomputed coordinate volumes")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("coords", help="spectral and Cartesian coordinate volumes")
    s.add_argument("--mask", required=True)
    s.add_argument("--out-prefix", required=True)
    s.add_argument("--downsample", type=int, default=1)
    s.set_defaults(func=cmd_coords)

    s = sub.add_parser("audit", help="parameter and shape tables for a config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("metrics", help="Dice/IoU table for a prediction")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--remap", default=None)
    s.add_argument("--out", default=None, help="write the table here and a figure next to it")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("splits", help="cross-validation folds for 18 subjects")
    s.add_argument("--subjects", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_splits)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (E.FormatError, E.DataMissing, OSError)):
        return EXIT_IO
    if isinstance(exc, (E.NonFiniteLoss, E.NonFiniteTensor, E.NoConvergence, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args, out)
        return args.func(args, out)
    except (E.FDFCNError, OSError, ValueError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
