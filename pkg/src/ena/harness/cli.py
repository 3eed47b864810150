"""Command line entry point: ``ena mask|check|train|bench|pilot``.

Exit codes: 0 success, 1 invariant or run failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from .. import attention as A
from ..errors import ConfigError, GeometryError, InvariantViolation
from ..numerics import NumericError
from . import bench as B
from . import checks as C
from . import pilot as P
from .config import RunConfig, apply_overrides, default_output_dir, reference_run
from .train import train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
KIND_ALIASES = {"sta": "sta_nd", "swa": "swa_nd", "block": "block_nd", "full": "full"}


class UsageError(Exception):
    pass


def parse_shape(text: str) -> tuple:
    try:
        dims = tuple(int(t) for t in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"cannot parse shape {text!r}; use e.g. 32x32") from None
    if not dims or min(dims) < 1:
        raise UsageError(f"shape {text!r} must have positive dims")
    return dims


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# mask


def cmd_mask(args) -> int:
    grid = parse_shape(args.grid)
    kind = KIND_ALIASES.get(args.kind, args.kind)
    if kind in ("block_nd", "swa_nd") and len(grid) == 1:
        kind = kind.replace("_nd", "_1d")
    tile = parse_shape(args.tile) if args.tile else None
    window = grid if args.window in (None, "eq-grid") else parse_shape(args.window)
    spec = A.WindowSpec(grid, window, tile, args.kernel_block, args.strict).validate(kind)
    bm = A.build_block_mask(kind, spec)
    flops = A.attention_flops(bm, args.head_dim)
    ratio = flops / A.full_attention_flops(spec.length, args.head_dim)
    doc = bm.to_json(kind, spec)
    doc["flop_ratio"] = ratio
    counts = doc["counts"]
    rows = [("kind", kind), ("grid", "x".join(map(str, spec.grid))), ("tile", "x".join(map(str, spec.tile))),
            ("window", "x".join(map(str, spec.window))), ("kernel_block", spec.kernel_block),
            ("tokens", spec.length), ("sparsity", f"{doc['sparsity']:.6f}"),
            ("block_sparsity", f"{doc['block_sparsity']:.6f}"),
            ("blocks", f"{bm.num_query_blocks}x{bm.num_key_blocks}"),
            ("empty", counts["empty"]), ("full", counts["full"]), ("mixed", counts["mixed"]),
            ("flop_ratio", f"{ratio:.6f}")]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    out = args.out or os.path.join(default_output_dir(), f"mask_{kind}_{'x'.join(map(str, grid))}.json")
    _write(out, A.dumps_layout(doc))
    print(f"layout written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check


def cmd_check(args) -> int:
    if args.suite not in C.suite_names():
        raise UsageError(f"unknown suite {args.suite!r}; expected one of {', '.join(C.suite_names())}")
    inject = args.inject or []
    bad = set(inject) - set(C.FAULTS)
    if bad:
        raise UsageError(f"unknown fault {sorted(bad)}; expected {C.FAULTS}")
    report = C.run_suite(args.suite, inject=inject, seed=args.seed)
    for r in report["results"]:
        print(f"{r['status'].upper():4}  {r['name']:<30} {r['detail']}")
    out = args.report or os.path.join(default_output_dir(), f"check_{args.suite}.json")
    _write(out, _dump(report))
    if not report["passed"]:
        print(f"failed invariants: {', '.join(report['failed'])}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def build_run_config(args) -> RunConfig:
    doc = {}
    if args.reference:
        doc = {k: v for k, v in reference_run().to_dict().items() if v is not None}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = {**doc, **json.load(fh)}
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = list(args.set or [])
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("dtype", "dtype"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    doc = apply_overrides(doc, overrides)
    return RunConfig.from_dict(doc).validate()


def cmd_train(args) -> int:
    config = build_run_config(args)
    out = args.out or config.output_dir or os.path.join(default_output_dir(), config.name)
    result = train(config, output_dir=out)
    s = result.summary
    print(f"val_accuracy {s['val_accuracy']:.6f}  val_loss {s['val_loss']:.6f}  steps {s['steps']}")
    for k, v in result.paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench and pilot


def cmd_bench(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    for n in lengths:
        if math.isqrt(n) ** 2 != n:
            raise UsageError(f"length {n} is not a perfect square")
    variants = args.variants.split(",")
    bad = set(variants) - set(B.VARIANTS)
    if bad:
        raise UsageError(f"unknown variants {sorted(bad)}; expected {B.VARIANTS}")
    result = B.run_bench(lengths, variants, reps=args.reps, train_reps=args.train_reps, seed=args.seed,
                         layers=args.layers, d_model=args.d_model, heads=args.heads)
    text = B.to_csv(result["rows"])
    print(text, end="")
    for v, e in result["exponents"].items():
        print(f"exponent {v}: {e:.3f}" if e is not None else f"exponent {v}: n/a")
    out = args.out or os.path.join(default_output_dir(), "bench.csv")
    _write(out, text)
    doc = {"stable": B.stable_view(result), "timing": {"rows": result["rows"], "exponents": result["exponents"]}}
    _write(os.path.splitext(out)[0] + ".json", _dump(doc))
    return EXIT_OK


def cmd_pilot(args) -> int:
    result = P.run_pilot(steps=args.steps, seed=args.seed)
    text = P.to_csv(result["rows"])
    print(text, end="")
    out = args.out or os.path.join(default_output_dir(), "pilot.csv")
    _write(out, text)
    _write(os.path.splitext(out)[0] + ".json",
           _dump({"rows": result["rows"], "settings": result["settings"], "timing": result["timing"]}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ena", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mask", help="analyse an attention layout and export its block census")
    m.add_argument("--grid", required=True, help="token grid, e.g. 64x64")
    m.add_argument("--tile", help="tile shape (default all ones)")
    m.add_argument("--window", help="window shape or eq-grid (default eq-grid)")
    m.add_argument("--kind", default="sta", help="sta, swa, block, full, or a full kind name")
    m.add_argument("--kernel-block", type=int, default=None, help="executor block size (default tile volume)")
    m.add_argument("--head-dim", type=int, default=64, help="head dimension for FLOP estimates")
    m.add_argument("--strict", action="store_true", help="require kernel_block >= 128")
    m.add_argument("--out", help="layout JSON path")
    m.set_defaults(func=cmd_mask)

    c = sub.add_parser("check", help="run invariant suites")
    c.add_argument("suite", nargs="?", default="all", help=f"one of {', '.join(C.suite_names())}")
    c.add_argument("--report", help="JSON report path")
    c.add_argument("--inject", action="append", help=f"inject a fault ({', '.join(C.FAULTS)})")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    t = sub.add_parser("train", help="train a model on a synthetic task")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--reference", action="store_true", help="start from the pinned golden-log run")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted keys)")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="time/FLOP/memory scaling table")
    b.add_argument("--lengths", default="256,1024,4096")
    b.add_argument("--variants", default=",".join(B.VARIANTS))
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--train-reps", type=int, default=3)
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--d-model", type=int, default=32)
    b.add_argument("--heads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (a JSON twin is written next to it)")
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("pilot", help="scan-strategy comparison table")
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_pilot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantViolation, NumericError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
