"""``shuffleseg`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (non-finite loss, failed gradient check). Sizes are given as
``HxW``, height first; reports echo both orders.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, FormatError, NumericError, ShapeError
from .graph import VARIANTS, ArchConfig, build_graph, padded_size

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_size(text: str):
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise argparse.ArgumentTypeError(f"size must be HxW with positive integers, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _print_config(values: Dict[str, object]):
    for k, v in values.items():
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        print(f"config.{k}={v}")


def _size_echo(h: int, w: int) -> str:
    return f"{h}x{w} (HxW; {w}x{h} as WxH)"


# ---------------------------------------------------------------- subcommands


def cmd_describe(args) -> int:
    from .flops import count_graph

    h, w = args.input_size
    arch = ArchConfig(variant=args.arch, n_classes=args.classes, groups=args.groups,
                      width_multiplier=args.width_multiplier)
    ph, pw = padded_size(arch.variant, h, w)
    arch = arch.replace(input_height=ph, input_width=pw)
    values = dict(arch.to_mapping())
    values["requested_size"] = _size_echo(h, w)
    values["report"] = args.report
    _print_config(values)
    report = count_graph(build_graph(arch), (1, 3, h, w), pad=True)
    print(report.format_kv() if args.report == "kv" else report.format_table())
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train_loop

    cfg = TrainConfig.load(args.config)
    values = cfg.to_mapping()
    if args.resume:
        values["resume"] = args.resume
    _print_config(values)
    every = max(1, cfg.max_steps // 20)

    def on_step(step, loss):
        if step % every == 0 or step == cfg.max_steps:
            print(f"step={step} loss={loss:.6f}", flush=True)

    result = train_loop(cfg, resume=args.resume, on_step=on_step)
    for step, miou in result.evals:
        print(f"eval step={step} miou={miou:.6f}")
    for p in result.checkpoints:
        print(f"checkpoint={p}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_manifest, load_samples
    from .train import TrainConfig, evaluate, load_checkpoint

    cfg = TrainConfig.load(args.config)
    manifest_path = getattr(cfg, f"{args.split}_manifest")
    if not manifest_path:
        raise ConfigError(f"{args.config}: no {args.split}_manifest configured")
    values = cfg.to_mapping()
    values.update(weights=args.weights, split=args.split, report=args.report)
    _print_config(values)
    graph = build_graph(cfg.arch)
    ck = load_checkpoint(args.weights, graph)
    table = cfg.class_table_obj()
    images, labels, _ = load_samples(load_manifest(manifest_path, args.split, cfg.class_table), cfg.arch.n_classes)
    report = evaluate(graph, ck.store, images, labels, table, cfg.arch.output_scale)
    print(report.format_kv() if args.report == "kv" else report.format_table())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .classes import ClassTable
    from .data import load_image, save_color_map
    from .train import load_checkpoint, predict

    ck = load_checkpoint(args.weights)
    if ck.arch is None:
        raise FormatError(f"{args.weights}: checkpoint carries no architecture record (meta.arch)")
    table = ck.class_table or ClassTable.generic(ck.arch.n_classes)
    x = load_image(args.image)
    h, w = x.shape[2:]
    ph, pw = padded_size(ck.arch.variant, h, w)
    arch = ck.arch.replace(input_height=ph, input_width=pw)
    values = dict(arch.to_mapping())
    values.update(weights=args.weights, image=args.image, image_size=_size_echo(h, w), out=args.out)
    _print_config(values)
    graph = build_graph(arch)
    ck.store.check_matches(graph)
    if (ph, pw) != (h, w):
        x = np.pad(x, ((0, 0), (0, 0), (0, ph - h), (0, pw - w)))
    pred = predict(graph, ck.store, x, table.ignore_index, output_scale=arch.output_scale)
    pred = pred[:, :, :h, :w]
    save_color_map(pred[0, 0], table.palette, args.out)
    counts = np.bincount(pred.reshape(-1), minlength=table.n_classes)
    for name, n in zip(table.names, counts):
        print(f"pixels.{name.replace(' ', '_')}={int(n)}")
    print(f"wrote={args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .train import grad_check, tiny_arch

    arch = tiny_arch(ArchConfig(variant=args.arch))
    values = dict(arch.to_mapping())
    values.update(seed=args.seed, samples=args.samples, step=args.step, precision="double",
                  tolerance=GRADCHECK_TOLERANCE)
    _print_config(values)
    report = grad_check(arch, seed=args.seed, n_samples=args.samples, step=args.step)
    print(report.format())
    ok = report.max_rel_error < GRADCHECK_TOLERANCE
    print("gradcheck=" + ("pass" if ok else "fail"))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    from .data import synth_dataset

    h, w = args.size
    _print_config({"out": args.out, "seed": args.seed, "count": args.count, "size": _size_echo(h, w),
                   "classes": args.classes, "split": args.split})
    manifest = synth_dataset(args.out, args.seed, args.count, (h, w), args.classes, args.split)
    print(f"manifest={manifest.path}")
    print(f"images={len(manifest)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shuffleseg", description="ShuffleNet-based real-time semantic segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("describe", help="per-layer parameter and FLOP report")
    d.add_argument("--arch", choices=VARIANTS, default="skipnet", help="decoder variant")
    d.add_argument("--input-size", type=parse_size, default=(512, 1024), metavar="HxW",
                   help="input size, height first (default 512x1024); rounded up to a valid multiple")
    d.add_argument("--report", choices=("table", "kv"), default="table", help="output layout")
    d.add_argument("--classes", type=int, default=20, help="number of classes (default 20)")
    d.add_argument("--groups", type=int, default=3, help="group count of grouped 1x1 convs (default 3)")
    d.add_argument("--width-multiplier", type=float, default=1.0, help="channel width multiplier")
    d.set_defaults(func=cmd_describe)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True, help="training config file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class and category IoU of a checkpoint")
    e.add_argument("--config", required=True, help="training config file naming the manifests")
    e.add_argument("--weights", required=True, help="checkpoint file")
    e.add_argument("--split", choices=("train", "val", "test"), default="val", help="manifest to evaluate")
    e.add_argument("--report", choices=("table", "kv"), default="table", help="output layout")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="render a palette-coloured prediction for one image")
    i.add_argument("--weights", required=True, help="checkpoint file (architecture and palette are read from it)")
    i.add_argument("--image", required=True, help="input P6 image")
    i.add_argument("--out", required=True, help="output P6 path")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference check of the whole-graph gradient")
    g.add_argument("--arch", choices=VARIANTS, default="skipnet", help="decoder variant")
    g.add_argument("--seed", type=int, default=0, help="seed for weights, data and sampled coordinates")
    g.add_argument("--samples", type=int, default=20, help="number of parameter coordinates to check")
    g.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a seeded synthetic shapes corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--count", type=int, default=200, help="number of images")
    s.add_argument("--size", type=parse_size, default=(64, 128), metavar="HxW", help="image size (default 64x128)")
    s.add_argument("--classes", type=int, default=5, help="classes including background (default 5)")
    s.add_argument("--split", default="train", help="split name used for file names and the manifest")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
