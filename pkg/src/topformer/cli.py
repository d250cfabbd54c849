"""Command-line entry point.

Exit codes: 0 success, 1 numeric check failed, 2 usage / input error,
3 weight binding or file I/O failure. Machine-readable output goes to
stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analyzer, checks, iofmt
from . import model as M
from . import tensor as T
from .config import HEAD_KINDS, VARIANTS, variant
from .errors import BindError, ConfigError, FormatError, InputError

log = logging.getLogger("topformer")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def parse_hw(text: str):
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"input size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("input size must be positive")
    return h, w


def parse_triplet(text: str):
    try:
        vals = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated floats, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated floats, got {text!r}")
    return vals


def _config(args):
    try:
        return variant(args.variant, head_kind=getattr(args, "head", "default"),
                       sase_stride=getattr(args, "sase_stride", None),
                       num_classes=getattr(args, "num_classes", None))
    except ConfigError as e:
        raise UsageError(str(e)) from None


def _checked_input(model, hw):
    try:
        M.check_input(model, *hw)
    except InputError as e:
        raise UsageError(str(e)) from None
    return hw


# --------------------------------------------------------------------------
# subcommands


def cmd_describe(args, out):
    cfg = _config(args)
    model = M.build(cfg)
    h, w = _checked_input(model, args.input)
    print(f"variant\t{cfg.name}", file=out)
    print(f"head\t{cfg.head_kind}", file=out)
    print(f"stem\tConv 3x3, {cfg.stem_channels}, stride {cfg.stem_stride}", file=out)
    sb = cfg.stem_block
    print(f"stem_block\tMB k={sb.kernel} t={sb.expand_ratio} c={sb.out_channels} s={sb.stride}", file=out)
    for i, stage in enumerate(cfg.stages, start=1):
        desc = "; ".join(f"MB k={b.kernel} t={b.expand_ratio} c={b.out_channels} s={b.stride}" for b in stage)
        print(f"stage{i}\t{desc}", file=out)
    print(f"L={cfg.num_transformer_blocks} H={cfg.num_heads} D={cfg.key_dim} "
          f"value_dim={cfg.value_dim} ffn_expansion={cfg.ffn_expansion}", file=out)
    print(f"M={cfg.sim_width} sase_stride={cfg.sase_stride} "
          f"injection_scales={','.join(f'1/{s}' for s in cfg.injection_scales)} "
          f"num_classes={cfg.num_classes}", file=out)
    tr = analyzer.trace_shapes(model, h, w)
    print("shape_trace", file=out)
    print(analyzer.format_trace(tr), file=out)
    return EXIT_OK


def cmd_analyze(args, out):
    cfg = _config(args)
    model = M.build(cfg)
    h, w = _checked_input(model, args.input)
    rep = analyzer.count_flops(model, h, w)
    if args.tsv:
        for line in rep.tsv_lines():
            print(line, file=out)
    else:
        print(analyzer.format_report(rep, per_layer=args.per_layer), file=out)
    if args.figure:
        from .plotting import plot_breakdown
        plot_breakdown(rep, args.figure)
        log.info("wrote %s", args.figure)
    return EXIT_OK


def cmd_init(args, out):
    cfg = _config(args)
    model = M.build(cfg)
    store = iofmt.random_init(model, args.seed)
    if args.fold:
        store = iofmt.WeightStore(M.fold(M.bind(model, store)).weights)
    iofmt.save_weights(store, args.out)
    print(f"wrote\t{args.out}\t{len(store)} tensors", file=out)
    return EXIT_OK


def _bind_any(model, store):
    """Bind an unfolded store, or a folded one (no BN entries)."""
    if any(".bn." in n for n in store):
        return M.fold(M.bind(model, store))
    return M.bind(M.Model(model.variant, model.graph, folded=True), store)


def cmd_infer(args, out):
    cfg = _config(args)
    model = M.build(cfg)
    try:
        store = iofmt.load_weights(args.weights)
        bound = _bind_any(model, store)
    except (OSError, FormatError, BindError) as e:
        print(f"error: cannot bind weights from {args.weights}: {e}", file=sys.stderr)
        return EXIT_IO
    try:
        image = iofmt.read_ppm(args.image, args.mean, args.std)
        M.check_input(model, *image.dims[2:])
    except (FormatError, InputError) as e:
        print(f"error: {args.image}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    T.set_num_threads(args.threads)
    t0 = time.perf_counter()
    result = M.forward(bound, image, upsample_to_input=args.upsample_to_input)
    ms = (time.perf_counter() - t0) * 1e3
    if cfg.head_kind == "classification":
        scores = result[0]
        for k in np.argsort(-scores, kind="stable")[:5]:
            print(f"class\t{k}\t{scores[k]:.6f}", file=out)
    else:
        idx = iofmt.argmax_map(result)
        try:
            iofmt.write_pgm(idx, args.out)
            if args.colorized:
                pal = iofmt.read_palette(args.palette) if args.palette else iofmt.default_palette(cfg.num_classes)
                iofmt.write_ppm_colorized(idx, pal, args.colorized)
        except (OSError, FormatError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        except InputError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"output\t{args.out}\t{idx.shape[0]}x{idx.shape[1]}", file=out)
    print(f"forward_ms\t{ms:.3f}", file=out)
    return EXIT_OK


def cmd_bench(args, out):
    from .bench import run_benchmark

    if args.iters < 3:
        raise UsageError("--iters must be >= 3")
    if args.warmup < 0:
        raise UsageError("--warmup must be >= 0")
    results = []
    for name in args.variant:
        args_v = argparse.Namespace(**{**vars(args), "variant": name})
        cfg = _config(args_v)
        _checked_input(M.build(cfg), args.input)
        res = run_benchmark(cfg, *args.input, warmup=args.warmup, iters=args.iters,
                            threads=args.threads, seed=args.seed)
        results.append(res)
        for line in res.lines():
            print(line, file=out)
    if args.figure:
        from .plotting import plot_latency
        plot_latency(results, args.figure)
    return EXIT_OK


def cmd_gradcheck(args, out):
    try:
        reports = checks.run_gradchecks(seed=args.seed, tol=args.tol, names=args.op or None)
    except ArithmeticError as e:
        print(f"FAIL\t{e}", file=out)
        return EXIT_FAIL
    print("op\tmax_rel_err\ttol\tchecked\tstatus", file=out)
    for r in reports:
        print(r.line(), file=out)
        if not r.passed:
            print(f"  worst: {r.worst}", file=sys.stderr)
    failed = [r.name for r in reports if not r.passed]
    print(f"summary\t{len(reports) - len(failed)}/{len(reports)} passed", file=out)
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_selftest(args, out):
    results = checks.run_selftest(args.variant or VARIANTS)
    for r in results:
        print(r.line(), file=out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topformer", description="TopFormer inference, cost analysis and checks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def arch(sp, multi=False):
        if multi:
            sp.add_argument("--variant", nargs="+", choices=VARIANTS, default=["base"])
        else:
            sp.add_argument("--variant", choices=VARIANTS, default="base")
        sp.add_argument("--head", choices=HEAD_KINDS, default="default")
        sp.add_argument("--sase-stride", type=int, choices=(32, 64, 128), default=None,
                        help="default 64 (32 for --head classification)")
        sp.add_argument("--num-classes", type=int, default=None,
                        help="default 150 (1000 for --head classification)")

    sp = sub.add_parser("describe", help="architecture listing and shape trace")
    arch(sp)
    sp.add_argument("--input", type=parse_hw, default=(512, 512), metavar="HxW")
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("analyze", help="parameter / FLOP tables")
    arch(sp)
    sp.add_argument("--input", type=parse_hw, default=(512, 512), metavar="HxW")
    sp.add_argument("--per-layer", action="store_true", help="include the per-layer table")
    sp.add_argument("--tsv", action="store_true", help="name<TAB>params<TAB>flops<TAB>n,c,h,w per layer")
    sp.add_argument("--figure", type=Path, help="write a module breakdown chart (png/pdf/svg)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("init", help="write seeded random weights in TPFW format")
    arch(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--fold", action="store_true", help="store BN-folded weights")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("infer", help="segment a P6 image")
    arch(sp)
    sp.add_argument("--weights", type=Path, required=True)
    sp.add_argument("--image", type=Path, required=True)
    sp.add_argument("--out", type=Path, default=Path("out.pgm"), help="argmax map (P5)")
    sp.add_argument("--colorized", type=Path, help="also write a colorized P6 here")
    sp.add_argument("--palette", type=Path, help="palette file: one 'R G B' line per class")
    sp.add_argument("--upsample-to-input", action="store_true")
    sp.add_argument("--threads", type=int, default=T.default_threads())
    sp.add_argument("--mean", type=parse_triplet, default=iofmt.IMAGENET_MEAN, metavar="R,G,B")
    sp.add_argument("--std", type=parse_triplet, default=iofmt.IMAGENET_STD, metavar="R,G,B")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("bench", help="single-image latency")
    arch(sp, multi=True)
    sp.add_argument("--input", type=parse_hw, default=(512, 512), metavar="HxW")
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--threads", type=int, default=T.default_threads())
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--figure", type=Path, help="write a latency box plot")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=None,
                    help="override every per-op tolerance (defaults: 1e-4 ops, 1e-6 sigmoid, 1e-3 model)")
    sp.add_argument("--op", action="append", help="run only this case (repeatable)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("selftest", help="fold equivalence, shape traces, op properties")
    sp.add_argument("--variant", nargs="*", choices=VARIANTS)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args, out)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
