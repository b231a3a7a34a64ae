"""Command line entry point: run, serve, mask-dump, bench."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .buffer import parse_layout
from .conditioning import parse_trace
from .core import ConfigError, SessionConfig, chunk_duration, load_config, reference_latent
from .denoise import ToyFlowModel
from .masks import LayoutError, build_group_mask, render_mask
from .pipeline import StageCost, run_pipelined, sequential_baseline, uniform_records
from .scheduler import RealtimeClock, SimClock, run_session, write_emission_log

log = logging.getLogger("streamforge")


def _costs(text: str) -> tuple[float, float]:
    try:
        d, v = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected '<denoise_ms>,<decode_ms>'") from None
    return d, v


def _config(path) -> SessionConfig:
    return load_config(path) if path else SessionConfig()


def cmd_run(args) -> int:
    config = _config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, rng_seed=args.seed)
    events = parse_trace(Path(args.trace).read_bytes())
    tick_s = chunk_duration(config)
    clock = RealtimeClock(tick_s) if args.realtime else SimClock(tick_s)
    records = run_session(config, reference_latent(config), events, ToyFlowModel(), clock)
    Path(args.out).write_text(write_emission_log(records), encoding="utf-8")
    log.info("wrote %d emission records to %s", len(records), args.out)
    if args.metrics:
        d, v = args.costs if args.costs else (tick_s * 1000, 60.0)
        run = run_pipelined(records, StageCost(d, v), chunk_duration_s=tick_s)
        Path(args.metrics).write_text(json.dumps(run.metrics.as_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    host, _, port = args.listen.rpartition(":")
    serve(_config(args.config), host or "127.0.0.1", int(port))
    return 0


def cmd_mask_dump(args) -> int:
    mask = build_group_mask(parse_layout(args.layout))
    print(render_mask(mask))
    return 0


def cmd_bench(args) -> int:
    d, v = args.costs
    costs = StageCost(d, v)
    records = uniform_records(args.chunks, args.warmup_ticks)
    piped = run_pipelined(records, costs, queue_capacity=args.queue, chunk_duration_s=args.chunk_s)
    serial = sequential_baseline(records, costs, chunk_duration_s=args.chunk_s)
    print(json.dumps({"pipelined": piped.metrics.as_dict(), "sequential": serial.metrics.as_dict()},
                     indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a session over a trace file")
    p.add_argument("--config")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="emission log (JSON lines)")
    clock = p.add_mutually_exclusive_group()
    clock.add_argument("--sim-clock", action="store_true", default=True)
    clock.add_argument("--realtime", action="store_true")
    p.add_argument("--metrics", help="write pipeline metrics here")
    p.add_argument("--costs", type=_costs, help="denoise,decode ms for --metrics")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="serve sessions over TCP")
    p.add_argument("--config")
    p.add_argument("--listen", default="127.0.0.1:7860")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("mask-dump", help="print the group mask for a layout")
    p.add_argument("--layout", required=True, help="e.g. Ref,LT0,ST,S0,S1,S2")
    p.set_defaults(func=cmd_mask_dump)

    p = sub.add_parser("bench", help="compare pipelined and sequential stage timing")
    p.add_argument("--costs", type=_costs, required=True)
    p.add_argument("--chunks", type=int, default=20)
    p.add_argument("--warmup-ticks", type=int, default=2)
    p.add_argument("--queue", type=int, default=2)
    p.add_argument("--chunk-s", type=float, default=0.48)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("STREAMFORGE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, LayoutError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
