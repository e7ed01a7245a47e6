"""heapseal command line.

Exit status: 0 success, 1 bad input, 2 ``defend`` blocked something or an
``e2e`` check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .callgraph import GraphError, Strategy, instrumentation_set, parse_call_graph
from .config import DEFAULT_QUOTA, Config, seed_from_env
from .defender import replay
from .encoder import MalformedTraceError
from .offline import analyze, format_warnings
from .patch import PatchFormatError, build_table, parse_patches, serialize_patches
from .pipeline import run_e2e
from .trace import TraceFormatError, parse_trace

EXIT_OK, EXIT_INPUT, EXIT_BLOCKED = 0, 1, 2

_STRATEGY_ORDER = (Strategy.FCS, Strategy.TCS, Strategy.SLIM, Strategy.INCREMENTAL)


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _nonneg(text: str) -> int:
    value = int(text, 0)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="incremental")
    p.add_argument("--seed", type=_seed, default=None,
                   help="site-constant seed (default: $HEAPSEAL_SEED or 0)")
    p.add_argument("--quota-bytes", type=_nonneg, default=DEFAULT_QUOTA)
    p.add_argument("--redzone-bytes", type=_nonneg, default=16)
    p.add_argument("--strict-uaf", action=argparse.BooleanOptionalAction, default=True,
                   help="block accesses to quarantined blocks (default) or only note them")


def _config(args) -> Config:
    seed = args.seed if args.seed is not None else seed_from_env()
    return Config(seed=seed, strategy=Strategy(args.strategy), quota_bytes=args.quota_bytes,
                  redzone_bytes=args.redzone_bytes, strict_uaf=args.strict_uaf)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heapseal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="list the call sites each strategy instruments")
    p.add_argument("graph", type=Path)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="incremental")
    p.add_argument("--all", action="store_true", help="compare all four strategies")

    p = sub.add_parser("analyze", help="offline diagnosis: trace -> patch file")
    p.add_argument("graph", type=Path)
    p.add_argument("trace", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True, help="patch file to write")
    _add_config_flags(p)

    p = sub.add_parser("defend", help="replay a trace over the hardened heap")
    p.add_argument("graph", type=Path)
    p.add_argument("trace", type=Path)
    p.add_argument("patches", type=Path)
    _add_config_flags(p)

    p = sub.add_parser("e2e", help="analyze then defend the same trace")
    p.add_argument("graph", type=Path)
    p.add_argument("trace", type=Path)
    p.add_argument("-o", "--patch-out", type=Path, default=None)
    _add_config_flags(p)
    return parser


def cmd_encode(args, out) -> int:
    g = parse_call_graph(args.graph.read_text())
    if not args.all:
        instr = instrumentation_set(g, args.strategy)
        out.write(f"strategy={instr.strategy.value} sites={len(instr)} edges={len(g.edges)}\n")
        for site in sorted(instr.sites):
            out.write(f"site {site}\n")
        return EXIT_OK

    sets = {s: instrumentation_set(g, s).sites for s in _STRATEGY_ORDER}
    out.write("# caller callee site " + " ".join(s.value for s in _STRATEGY_ORDER) + "\n")
    for e in g.edges:
        marks = " ".join("x" if e in sets[s] else "." for s in _STRATEGY_ORDER)
        out.write(f"site {e} {marks}\n")
    for s in _STRATEGY_ORDER:
        out.write(f"count {s.value} {len(sets[s])}\n")
    return EXIT_OK


def cmd_analyze(args, out) -> int:
    cfg = _config(args)
    g = parse_call_graph(args.graph.read_text())
    trace = parse_trace(args.trace.read_text())
    result = analyze(g, instrumentation_set(g, cfg.strategy), trace, cfg)
    args.out.write_text(serialize_patches(result.patches))
    out.write(format_warnings(result.warnings))
    out.write(f"patches={len(result.patches)} warnings={len(result.warnings)}\n")
    return EXIT_OK


def cmd_defend(args, out) -> int:
    cfg = _config(args)
    g = parse_call_graph(args.graph.read_text())
    trace = parse_trace(args.trace.read_text())
    table = build_table(parse_patches(args.patches.read_text()))
    report = replay(g, instrumentation_set(g, cfg.strategy), table, trace, cfg)
    out.write(report.to_text())
    return EXIT_BLOCKED if report.blocked else EXIT_OK


def cmd_e2e(args, out) -> int:
    cfg = _config(args)
    g = parse_call_graph(args.graph.read_text())
    trace = parse_trace(args.trace.read_text())
    result = run_e2e(g, trace, cfg)
    if args.patch_out is not None:
        args.patch_out.write_text(result.patch_text)
    out.write(result.to_text())
    return EXIT_OK if result.passed else EXIT_BLOCKED


_COMMANDS = {"encode": cmd_encode, "analyze": cmd_analyze, "defend": cmd_defend, "e2e": cmd_e2e}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args, out)
    except (OSError, GraphError, TraceFormatError, PatchFormatError,
            MalformedTraceError, ValueError) as exc:
        print(f"heapseal: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
