"""Command-line front end: run, sweep, verify, replay."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .runner import load_protocol_trace, replay, run_experiment, sweep
from .scheduler import (
    load_trace,
    max_observed_delay,
    verify_coverage,
    verify_delay_bound,
)


def _add_common(parser):
    parser.add_argument("--config", required=True, help="path to a JSON config file")
    parser.add_argument("--output-dir", default=None,
                        help="override the config's output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asyncgt",
        description="Asynchronous decentralized SGD with gradient tracking: "
                    "deterministic event-driven simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    _add_common(p_run)
    p_run.add_argument("--seeds", default=None,
                       help="comma-separated replicate seeds overriding the config")
    p_run.add_argument("--snapshot-interval", type=int, default=None,
                       help="override the config's snapshot interval")

    p_sweep = sub.add_parser("sweep", help="run a list of configs and aggregate")
    _add_common(p_sweep)

    p_verify = sub.add_parser("verify", help="check a trace against the "
                                             "activation and delay assumptions")
    p_verify.add_argument("--trace", required=True, help="trace file (JSONL)")
    p_verify.add_argument("--coverage-window", "-T", type=int, required=True,
                          dest="T", help="activation coverage window T")
    p_verify.add_argument("--max-delay", "-D", type=int, required=True,
                          dest="D", help="delay bound D")
    p_verify.add_argument("--agents", "-m", type=int, required=True,
                          dest="m", help="number of agents")

    p_replay = sub.add_parser("replay", help="re-execute a dumped trace")
    _add_common(p_replay)
    p_replay.add_argument("--trace", required=True, help="trace file (JSONL)")
    p_replay.add_argument("--seed", type=int, default=None,
                          help="noise seed override (default: first config seed)")
    return parser


def _cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.seeds is not None:
        config.replicates = [int(s) for s in args.seeds.split(",") if s.strip()]
    if args.snapshot_interval is not None:
        config.snapshot_interval = args.snapshot_interval
    result = run_experiment(config, output_dir=args.output_dir)
    term = result.summary["terminal"]
    print(f"config {result.config_hash}: {len(result.replicates)} replicate(s), "
          f"{config.events} events each")
    for col in ("f_avg", "grad_inf", "dev_inf_avg", "merit"):
        print(f"  terminal {col}: {term[col]['mean']:.6g}")
    for col, val in result.summary["rates"].items():
        if not col.endswith("_note"):
            print(f"  fitted slope {col}: "
                  + (f"{val:.3f}" if val is not None else "n/a"))
    return 0


def _cmd_sweep(args) -> int:
    payload = json.loads(Path(args.config).read_text())
    if "runs" not in payload:
        raise ConfigError("runs", "sweep file needs a 'runs' list")
    items = []
    for idx, entry in enumerate(payload["runs"]):
        key = entry.get("key_value", idx)
        items.append((key, ExperimentConfig.from_dict(entry["config"])))
    out = sweep(items, output_dir=args.output_dir)
    for entry in out["entries"]:
        if "error" in entry:
            print(f"  {payload.get('sweep_key', 'key')}={entry['key_value']}: "
                  f"ERROR {entry['error']}")
        else:
            print(f"  {payload.get('sweep_key', 'key')}={entry['key_value']}: "
                  f"grad_inf={entry['terminal']['grad_inf']['mean']:.6g} "
                  f"dev_inf_avg={entry['terminal']['dev_inf_avg']['mean']:.6g}")
    return 0


def _cmd_verify(args) -> int:
    trace = load_trace(args.trace)
    ok_cov = verify_coverage(trace, args.T, args.m)
    ok_delay = verify_delay_bound(trace, args.D)
    print(f"coverage (T={args.T}): {'PASS' if ok_cov else 'FAIL'}")
    print(f"delay bound (D={args.D}): {'PASS' if ok_delay else 'FAIL'}")
    print(f"max observed delay: {max_observed_delay(trace)}")
    return 0 if ok_cov and ok_delay else 1


def _cmd_replay(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    trace = load_protocol_trace(args.trace)
    snaps, worst_gap = replay(config, trace, seed=args.seed,
                              output_dir=args.output_dir)
    print(f"replayed {len(trace)} events, {len(snaps)} snapshots")
    if worst_gap is not None:
        print(f"largest recorded-vs-recomputed residual gap: {worst_gap:.3g}")
        return 0 if worst_gap < 1e-12 else 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "replay":
            return _cmd_replay(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
