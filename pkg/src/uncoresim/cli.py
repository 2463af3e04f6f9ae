"""Command-line interface.

    uncoresim run --config F --seed N [--cycles N] [--stats-out F] [--trace-out F]
    uncoresim scenario <name> --seed N [options]
    uncoresim litmus --runs N --ops N --seed N [--mutate]
    uncoresim list-scenarios

Exit status is 0 iff every check of the invoked workload passed.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .harness import (
    RunReport, SCENARIOS, TraceWriter, list_scenarios, litmus_campaign,
)
from .system import System


def _add_io_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="configuration file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stats-out", default=None, help="write the report JSON here")
    p.add_argument("--trace-out", default=None, help="write the per-flit CSV here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uncoresim", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured system bare")
    _add_io_args(run_p)
    run_p.add_argument("--cycles", type=int, default=None,
                       help="stop after this many cycles (default: quiescence)")

    sc_p = sub.add_parser("scenario", help="run a named scenario")
    sc_p.add_argument("name")
    _add_io_args(sc_p)
    sc_p.add_argument("--param", action="append", default=[],
                      metavar="KEY=VALUE", help="scenario parameter override")

    li_p = sub.add_parser("litmus", help="randomized coherence campaign")
    li_p.add_argument("--runs", type=int, default=100)
    li_p.add_argument("--ops", type=int, default=10_000)
    li_p.add_argument("--seed", type=int, default=0)
    li_p.add_argument("--mutate", action="store_true",
                      help="inject the disabled-back-invalidation fault")
    li_p.add_argument("--workers", type=int, default=None)

    sub.add_parser("list-scenarios", help="list available scenarios")
    return ap


def _parse_params(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(f"bad --param {pair!r}, expected KEY=VALUE")
        k, v = pair.split("=", 1)
        try:
            out[k] = int(v, 0)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    cfg.seed = args.seed
    trace = TraceWriter(args.trace_out) if args.trace_out else None
    system = System(cfg, trace=trace)
    stats = system.run(args.cycles)
    if trace:
        trace.close()
    report = RunReport(scenario="run", config_digest=cfg.digest(),
                       seed=cfg.seed, stats=stats.to_dict())
    if args.stats_out:
        report.write(args.stats_out)
    print(report.to_canonical_json(), end="")
    return 0 if stats.deadlock is None else 1


def cmd_scenario(args) -> int:
    if args.name not in SCENARIOS:
        print(f"unknown scenario {args.name!r}; try list-scenarios",
              file=sys.stderr)
        return 2
    cfg = load_config(args.config)
    trace = TraceWriter(args.trace_out) if args.trace_out else None
    report = SCENARIOS[args.name].run(cfg, seed=args.seed, trace=trace,
                                      **_parse_params(args.param))
    if trace:
        trace.close()
    if args.stats_out:
        report.write(args.stats_out)
    for c in report.checks:
        print(c)
    for note in report.notes:
        print(f"  note: {note}")
    print(f"{'PASS' if report.passed else 'FAIL'} {args.name} "
          f"(digest {report.config_digest}, seed {report.seed})")
    print(f"wall-clock: {report.wall_clock_s:.2f}s", file=sys.stderr)
    return 0 if report.passed else 1


def cmd_litmus(args) -> int:
    def tick(i):
        if (i + 1) % 10 == 0:
            print(f"  {i + 1}/{args.runs} runs", file=sys.stderr)

    result = litmus_campaign(args.runs, args.ops, args.seed,
                             mutate=args.mutate, workers=args.workers,
                             progress=tick)
    print(json.dumps(result.to_dict(), indent=1, sort_keys=True))
    return 0 if result.passed else 1


def cmd_list(args) -> int:
    for name, desc in list_scenarios():
        print(f"{name:18s} {desc}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "scenario":
            return cmd_scenario(args)
        if args.command == "litmus":
            return cmd_litmus(args)
        return cmd_list(args)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
