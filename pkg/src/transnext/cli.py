"""Command-line entry point: info, forward, bench, erf, selftest.

Reports are CSV on stdout with ``#``-prefixed header lines that echo the
resolved configuration and seed. Exit codes: 0 ok, 2 usage or shape error,
3 I/O or archive error, 4 self-test failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import selftest
from .archive import ArchiveError, load_tensors, load_weights, save_tensors
from .config import NAMED, ModelConfig, load_config
from .erf import erf_saliency, write_grid_text, write_pgm
from .flops import count_flops
from .kernels import BENCH_HEADER, DEFAULT_TILE, bench
from .model import BIAS_MODES, build_model, forward
from .tensor import ConfigError, DomainError, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SELFTEST = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _echo_config(cfg: ModelConfig, out, **extra) -> None:
    out.write(f"# config: {cfg.name}\n")
    for line in cfg.to_text().splitlines():
        out.write(f"# {line}\n")
    for k, v in extra.items():
        out.write(f"# {k}={v}\n")


def cmd_info(args, out) -> int:
    cfg = load_config(args.config)
    mode = args.mode or cfg.pool_mode
    rep = count_flops(cfg, args.resolution, args.resolution, mode)
    _echo_config(cfg, out, seed="none", resolution=args.resolution, mode=mode)
    out.write(f"# params={rep.params} ({rep.params / 1e6:.2f}M)\n")
    out.write(f"# flops_mac={rep.total('mac')} ({rep.total('mac') / 1e9:.2f}G)\n")
    out.write(f"# flops_flop={rep.total('flop')} ({rep.total('flop') / 1e9:.2f}G)\n")
    out.write("module,params,macs,ops,total_mac,total_flop\n")
    for r in rep.rows:
        out.write(f"{r.module},{r.params},{r.macs},{r.ops},{r.total('mac')},{r.total('flop')}\n")
    mac_total = rep.total("mac")
    flop_total = rep.total("flop")
    out.write(f"total,{rep.params},{sum(r.macs for r in rep.rows)},"
              f"{sum(r.ops for r in rep.rows)},{mac_total},{flop_total}\n")
    if args.figure:
        from .plotting import plot_stage_costs
        plot_stage_costs(rep, args.figure)
        out.write(f"# figure={args.figure}\n")
    return EXIT_OK


def cmd_forward(args, out) -> int:
    cfg = load_config(args.config)
    if args.weights:
        model = load_weights(args.weights, cfg)
        source = f"weights={args.weights}"
    else:
        model = build_model(cfg, args.seed)
        source = f"seed={args.seed}"
    tensors = load_tensors(args.input)
    if "image" not in tensors:
        raise ArchiveError(f"input archive {args.input} has no tensor named 'image'")
    image = tensors["image"]
    if image.ndim != 3 or image.shape[0] != cfg.in_chans:
        raise ShapeError(f"tensor 'image' must be [{cfg.in_chans},H,W], got {list(image.shape)}")
    mode = args.mode or cfg.pool_mode
    _echo_config(cfg, out, **dict([source.split("=", 1)]), mode=mode,
                 bias_mode=args.bias_mode, input=args.input)
    logits = forward(model, image, mode, args.bias_mode)
    if not np.all(np.isfinite(logits)):
        raise DomainError("forward produced non-finite logits")
    save_tensors({"logits": logits}, args.output)
    top = np.argsort(-logits, kind="stable")[:5]
    out.write("rank,class,logit\n")
    for i, c in enumerate(top):
        out.write(f"{i},{c},{logits[c]:.9g}\n")
    out.write(f"# output={args.output}\n")
    return EXIT_OK


def cmd_bench(args, out) -> int:
    cases = ("fused", "naive") if args.case == "both" else (args.case,)
    out.write(f"# seed={args.seed} tile={args.tile} warmup={args.warmup}\n")
    out.write(BENCH_HEADER + "\n")
    results = []
    for h in args.h:
        w = args.w if args.w else h
        for case in cases:
            r = bench(case, h, w, args.c, args.heads, args.k, args.iters, tile=args.tile,
                      warmup=args.warmup, seed=args.seed)
            results.append(r)
            out.write(r.csv_row() + "\n")
            out.flush()
    if args.figure:
        from .plotting import plot_bench
        plot_bench(results, args.figure)
        out.write(f"# figure={args.figure}\n")
    return EXIT_OK


def cmd_erf(args, out) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg, args.seed, np.float64)
    if args.input:
        tensors = load_tensors(args.input)
        if "image" not in tensors:
            raise ArchiveError(f"input archive {args.input} has no tensor named 'image'")
        image = tensors["image"].astype(np.float64)
    else:
        image = np.random.default_rng(args.seed).standard_normal(
            (cfg.in_chans, args.resolution, args.resolution))
    stage = args.stage % cfg.num_stages
    _echo_config(cfg, out, seed=args.seed, stage=stage, channel=args.channel, step=args.step,
                 resolution=f"{image.shape[1]}x{image.shape[2]}")
    grid = erf_saliency(model, image, stage, args.channel, args.step, args.mode,
                        allow_large=args.allow_large)
    prefix = Path(args.output)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    txt, pgm = prefix.with_suffix(".txt"), prefix.with_suffix(".pgm")
    write_grid_text(txt, grid)
    write_pgm(pgm, grid)
    peak = np.unravel_index(int(np.argmax(grid)), grid.shape)
    out.write("grid_h,grid_w,peak_row,peak_col,support_fraction\n")
    out.write(f"{grid.shape[0]},{grid.shape[1]},{peak[0]},{peak[1]},"
              f"{np.count_nonzero(grid) / grid.size:.6f}\n")
    out.write(f"# grid={txt}\n# image={pgm}\n")
    if args.figure:
        from .plotting import plot_erf
        plot_erf(grid, args.figure, f"{cfg.name} stage {stage}")
        out.write(f"# figure={args.figure}\n")
    return EXIT_OK


def cmd_selftest(args, out) -> int:
    names = args.suite or list(selftest.SUITES)
    unknown = [n for n in names if n not in selftest.SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s): {', '.join(unknown)}")
    out.write(f"# seed=fixed suites={len(names)}\n")
    out.write("suite,status,detail\n")
    try:
        n = selftest.run(names, emit=lambda line: out.write(line + "\n"))
    except AssertionError:
        return EXIT_SELFTEST
    out.write(f"# {n} suites passed\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transnext", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    configs = ", ".join(NAMED)

    info = sub.add_parser("info", help="parameter and FLOP report")
    info.add_argument("--config", default="micro", help=f"{configs} or a config file path")
    info.add_argument("--resolution", type=int, default=224)
    info.add_argument("--mode", choices=("normal", "linear"))
    info.add_argument("--figure", help="write a per-stage cost figure (png/pdf/svg)")
    info.set_defaults(func=cmd_info)

    fw = sub.add_parser("forward", help="classify an image archive")
    fw.add_argument("--config", default="micro", help=f"{configs} or a config file path")
    src = fw.add_mutually_exclusive_group()
    src.add_argument("--weights", help="weight archive")
    src.add_argument("--seed", type=int, default=0, help="initialisation seed (default 0)")
    fw.add_argument("--input", required=True, help="archive with tensor 'image' [3,H,W]")
    fw.add_argument("--mode", choices=("normal", "linear"))
    fw.add_argument("--bias-mode", choices=BIAS_MODES, default="extrapolate")
    fw.add_argument("--output", required=True, help="archive to write tensor 'logits' to")
    fw.set_defaults(func=cmd_forward)

    b = sub.add_parser("bench", help="fused vs naive sliding-window kernel bench")
    b.add_argument("--case", choices=("fused", "naive", "both"), default="both")
    b.add_argument("--h", type=int, nargs="+", default=[56], help="one or more map heights")
    b.add_argument("--w", type=int, help="map width (default: same as height)")
    b.add_argument("--c", type=int, default=72)
    b.add_argument("--heads", type=int, default=3)
    b.add_argument("--k", type=int, default=3)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--tile", type=int, default=DEFAULT_TILE)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--figure", help="write a time/scratch figure")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("erf", help="finite-difference effective receptive field")
    e.add_argument("--config", default="toy", help=f"{configs} or a config file path")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--input", help="archive with tensor 'image'; default: seeded noise")
    e.add_argument("--resolution", type=int, default=16)
    e.add_argument("--stage", type=int, default=-1)
    e.add_argument("--channel", type=int, default=0)
    e.add_argument("--step", type=float, default=1e-3)
    e.add_argument("--mode", choices=("normal", "linear"))
    e.add_argument("--allow-large", action="store_true", help="lift the 64x64 input guard")
    e.add_argument("--output", default="erf", help="path prefix for .txt and .pgm outputs")
    e.add_argument("--figure", help="write a heat-map figure")
    e.set_defaults(func=cmd_erf)

    s = sub.add_parser("selftest", help="run the oracle suites")
    s.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args, out)
    except (ArchiveError, OSError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_IO
    except (ShapeError, ConfigError, DomainError, UsageError, ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
