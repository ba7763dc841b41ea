"""Command-line entry point: quantize, eval, inspect, compare, selftest.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, fileformat as ff, harness
from .optimizer import METHODS, OptimizationError, OptimizerConfig, quantize_block
from .uq import ClippingStrategy, QuantError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(d) for d in text.split(","))
    except ValueError:
        raise UsageError(f"bad dims {text!r}; expected comma-separated integers") from None
    if len(dims) < 2 or min(dims) < 1:
        raise UsageError(f"bad dims {text!r}; need at least two positive sizes")
    return dims


def _config(args) -> OptimizerConfig:
    try:
        return OptimizerConfig(k=args.bits, group_size=args.group_size, epochs=args.epochs, lr_flex=args.lr_flex,
                               lr_bcq=args.lr_bcq, G=args.grid, T=args.alt_iters, p=args.period,
                               strategy=args.strategy, seed=args.seed, method=args.method)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_quantize(args) -> int:
    cfg = _config(args)
    shape = None
    if args.input.startswith("toy:"):
        block = harness.make_toy_block(_parse_dims(args.input[4:]), args.seed)
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"layer{i}.uqpk" for i in range(len(block.weights))]
    else:
        W = np.asarray(ff.read_tensor(args.input), dtype=np.float64)
        if W.ndim == 0 or W.size == 0:
            raise ff.ShapeMismatchError("cannot quantize an empty or scalar tensor")
        shape = W.shape
        # a tensor is treated as one affine layer over its last axis
        block = harness.ToyBlock([W.reshape(-1, W.shape[-1])], [np.zeros(int(np.prod(W.shape[:-1])))])
        targets = [Path(args.output)]
    data = harness.sample_inputs(args.samples, block.weights[0].shape[1], args.seed)
    res = quantize_block(block, data, data, cfg)
    for layer, path in zip(res.layers, targets):
        art = ff.artifact_from_layer(layer)
        if shape is not None:
            art = ff.PackedArtifact(art.k, art.g, shape, art.alpha, art.z_b, art.codes)
        ff.write_packed(path, art)
        print(f"wrote {path}: {art.n_groups} groups, {art.payload_bits()} payload bits")
    print(f"block reconstruction error: init {res.init_recon_error:.6g} final {res.final_recon_error:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    art = ff.read_packed(args.artifact)
    ref = np.asarray(ff.read_tensor(args.reference), dtype=np.float64)
    if ref.shape != art.shape:
        raise ff.ShapeMismatchError(f"reference shape {ref.shape} does not match artifact shape {art.shape}")
    diff = (ref - ff.dequantize_artifact(art)).reshape(-1, art.shape[-1] if art.shape else 1)
    per_group = []
    for row in diff:
        lo = 0
        for w in ff.group_widths(art.shape, art.g):
            per_group.append(float(np.sum(row[lo:lo + w] ** 2)))
            lo += w
    per_group = np.array(per_group)
    print(f"quantization error (sum of squares): {per_group.sum():.9g}")
    print(f"groups: {per_group.size}  mean: {per_group.mean():.6g}  max: {per_group.max():.6g}  "
          f"min: {per_group.min():.6g}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    art = ff.read_packed(args.artifact)
    widths = ff.group_widths(art.shape, art.g)
    print(f"format: UQPK v{ff.VERSION}")
    print(f"shape: {'x'.join(map(str, art.shape))}  k: {art.k}  g: {art.g}  groups: {art.n_groups}")
    print(f"bits/group: {ff.group_bits(art.g, art.k)} (g*k + 16*(k+1) = {art.g}*{art.k} + 16*{art.k + 1})")
    if widths and widths[-1] != art.g:
        print(f"tail groups: width {widths[-1]}, {ff.group_bits(widths[-1], art.k)} bits each")
    total = art.payload_bits()
    print(f"payload bits: {total}  bits/weight: {total / max(int(np.prod(art.shape)), 1):.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    setup = harness.DeskSetup(dims=_parse_dims(args.dims), samples=args.samples)
    methods = tuple(args.methods.split(","))
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise UsageError(f"unknown method(s): {', '.join(unknown)}")
    reports = harness.compare(seeds=tuple(args.seeds), methods=methods, setup=setup, epochs=args.epochs)
    lines = [r.to_json() for r in reports]
    if args.output:
        Path(args.output).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    print(harness.summary_table(reports), file=sys.stderr if not args.output else sys.stdout)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest
    failures = selftest.run(print)
    print("selftest: " + ("ok" if not failures else f"{failures} check(s) failed"))
    return EXIT_OK if not failures else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uniquant", description="Unified uniform/binary-coding weight quantization.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize a UQTF tensor (or toy:DIMS block) to UQPK")
    q.add_argument("input", help="UQTF tensor file, or toy:64,256,64 for a seeded toy block")
    q.add_argument("--method", choices=METHODS, default="uniquanf")
    q.add_argument("--bits", type=int, default=3)
    q.add_argument("--group-size", type=int, default=64)
    q.add_argument("--grid", type=int, default=30, help="clipping grid size G")
    q.add_argument("--alt-iters", type=int, default=15, help="alternating iterations T")
    q.add_argument("--period", type=int, default=2, help="remapping period p")
    q.add_argument("--strategy", choices=[s.value for s in ClippingStrategy], default="fixed-minimum")
    q.add_argument("--epochs", type=int, default=20)
    q.add_argument("--lr-flex", type=float, default=0.005)
    q.add_argument("--lr-bcq", type=float, default=0.0005)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--samples", type=int, default=32, help="calibration samples")
    q.add_argument("-o", "--output", required=True, help="output file (directory for toy blocks)")
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="quantization error of an artifact against a reference tensor")
    e.add_argument("artifact")
    e.add_argument("reference")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print header and bit accounting")
    i.add_argument("artifact")
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("compare", help="run the baseline matrix on desk-scale toy blocks")
    c.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    c.add_argument("--methods", default=",".join(METHODS))
    c.add_argument("--dims", default="64,256,64")
    c.add_argument("--samples", type=int, default=32)
    c.add_argument("--epochs", type=int, default=20)
    c.add_argument("-o", "--output", help="write JSON lines here instead of stdout")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("selftest", help="run the oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"uniquant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ff.FormatError, QuantError, OptimizationError, OSError, ValueError) as exc:
        print(f"uniquant: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
