"""Experiment orchestration: event loop, replicates, baselines, rate fits.

A run executes the event loop (schedule -> activation -> weight channel)
once per replicate noise seed, measuring a metrics snapshot every
`snapshot_interval` events plus one final snapshot.  Snapshots are taken
*before* the event at iteration k is applied, against the agent scheduled
to act at k, so the error terms line up with the pre-event state they
describe.  The graph, oracle, and schedule are built from per-component
seeds fixed in the config, so replicates differ only in gradient noise.

Outputs per replicate: a CSV snapshot table.  Per run: a replicate-mean
CSV, a deterministic summary JSON (terminal values, fitted decay slopes,
config hash, surrogate notes), and a non-deterministic timing sidecar.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_delay_model, build_policy
from .metrics import MetricsSnapshot, WeightChannel, collect_snapshot, mass_residual
from .oracles import SampleDraw
from .protocol import EventRecord, TrackingProtocol
from .scheduler import ScheduleEvent, generate_trace

SURROGATE_NOTES = {
    "consensus_center": "uniform average of agent models (not the limit-weighted average)",
    "mass_share": "weight-channel estimate (constant-input push-sum replica)",
}


class DegenerateSeriesError(ValueError):
    """The series hit zero or negative values; the audit floor was reached."""


@dataclass
class ReplicateResult:
    seed: int
    snapshots: list[MetricsSnapshot]
    trace: list[EventRecord] | None = None


@dataclass
class RunResult:
    config_hash: str
    replicates: list[ReplicateResult]
    summary: dict


def fit_rate(series, window: float = 0.5) -> float:
    """Least-squares slope of log(value) against log(k) over the tail.

    `window` is the tail fraction of the points kept.  Values must be
    strictly positive there; a zero or negative value means the series hit
    the audit floor and a power law no longer applies.
    """
    pts = [(k, v) for k, v in series if k > 0]
    if not (0.0 < window <= 1.0):
        raise ValueError(f"window must be in (0, 1], got {window}")
    tail = pts[len(pts) - max(1, math.ceil(window * len(pts))):]
    if len(tail) < 100:
        raise ValueError(f"need at least 100 tail points, got {len(tail)}")
    ks = np.array([k for k, _ in tail], dtype=float)
    vs = np.array([v for _, v in tail], dtype=float)
    if np.any(vs <= 0.0):
        raise DegenerateSeriesError("series reached zero/negative values; not fitted")
    slope = np.polyfit(np.log(ks), np.log(vs), 1)[0]
    return float(slope)


def run_replicate(graph, mixing, oracle, config: ExperimentConfig, steps, seed: int,
                  events_override: list[ScheduleEvent] | None = None) -> ReplicateResult:
    """One deterministic pass of the event loop for one noise seed."""
    D = config.schedule["delay"].get("D", 0)
    if events_override is None:
        policy = build_policy(config.schedule, graph.m)
        dmodel = build_delay_model(config.schedule, graph)
        # one extra event supplies the next-active agent for the final snapshot
        events = generate_trace(policy, dmodel, config.events + 1)
    else:
        events = events_override
        if len(events) < config.events + 1:
            raise ValueError("event trace is shorter than the configured run")
    proto = TrackingProtocol(oracle, graph, mixing, noise_seed=seed,
                             shadow=config.shadow, max_delay=D)
    wc = WeightChannel(graph, mixing)
    snaps: list[MetricsSnapshot] = []
    trace: list[EventRecord] = []
    max_d = 0
    for k in range(config.events + 1):
        ev = events[k]
        if k % config.snapshot_interval == 0 or k == config.events:
            snaps.append(collect_snapshot(proto, k, ev.agent, wc, D, max_d))
        if k == config.events:
            break
        if ev.delays:
            dmax = max(ev.delays.values())
            if dmax > max_d:
                max_d = dmax
        rec = proto.activate(k, ev.agent, ev.delays, steps.gamma(k))
        wc.apply(k, ev.agent, rec.taus)
        if config.dump_trace:
            trace.append(EventRecord(
                k=rec.k, agent=rec.agent, gamma=rec.gamma, delays=rec.delays,
                taus=rec.taus, residual=mass_residual(proto.states, graph)))
    return ReplicateResult(seed=seed, snapshots=snaps,
                           trace=trace if config.dump_trace else None)


def snapshots_to_csv(snapshots) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricsSnapshot.columns())
    for snap in snapshots:
        writer.writerow(snap.row())
    return buf.getvalue()


def mean_snapshot_table(replicates: list[ReplicateResult]) -> list[list[float]]:
    """Replicate-mean of every column; rows align across seeds by construction."""
    rows = []
    n_rows = len(replicates[0].snapshots)
    for r in replicates:
        if len(r.snapshots) != n_rows:
            raise ValueError("replicates produced different snapshot grids")
    for idx in range(n_rows):
        cols = np.array([r.snapshots[idx].row() for r in replicates], dtype=float)
        rows.append(list(cols.mean(axis=0)))
    return rows


def _mean_csv(replicates) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricsSnapshot.columns())
    for row in mean_snapshot_table(replicates):
        writer.writerow([int(row[0])] + row[1:])
    return buf.getvalue()


def _series(replicates, column: str):
    cols = MetricsSnapshot.columns()
    idx = cols.index(column)
    mean_rows = mean_snapshot_table(replicates)
    return [(int(r[0]), r[idx]) for r in mean_rows]


def build_summary(config: ExperimentConfig, replicates: list[ReplicateResult],
                  tail_window: float = 0.5) -> dict:
    terminal = {}
    for col in ("grad_inf", "dev_inf_avg", "f_avg", "e_t_hat", "e_c", "e_z",
                "merit", "mass_residual", "max_delay_so_far"):
        idx = MetricsSnapshot.columns().index(col)
        per_seed = [r.snapshots[-1].row()[idx] for r in replicates]
        terminal[col] = {
            "per_seed": per_seed,
            "mean": float(np.mean(per_seed)),
        }
    rates = {}
    for col in ("e_c", "e_z", "merit"):
        try:
            rates[col] = fit_rate(_series(replicates, col), tail_window)
        except (ValueError, DegenerateSeriesError) as exc:
            rates[col] = None
            rates[col + "_note"] = str(exc)
    return {
        "config_hash": config.config_hash(),
        "seeds": list(config.replicates),
        "events": config.events,
        "snapshot_interval": config.snapshot_interval,
        "terminal": terminal,
        "rates": rates,
        "surrogates": dict(SURROGATE_NOTES),
    }


def _write_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps({
                "k": rec.k, "agent": rec.agent, "gamma": rec.gamma,
                "delays": {str(j): d for j, d in rec.delays.items()},
                "taus": {str(j): t for j, t in rec.taus.items()},
                "residual": rec.residual,
            }, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig, output_dir=None) -> RunResult:
    """Validate, run every replicate, and (optionally) write the output tree."""
    graph, mixing, oracle, steps = config.validate()
    t0 = time.perf_counter()
    replicates = [
        run_replicate(graph, mixing, oracle, config, steps, seed)
        for seed in config.replicates
    ]
    wall = time.perf_counter() - t0
    summary = build_summary(config, replicates)
    result = RunResult(config_hash=summary["config_hash"],
                       replicates=replicates, summary=summary)

    out = output_dir or config.output_dir
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        config.to_file(out / "config.json")
        for rep in replicates:
            (out / f"snapshots_seed{rep.seed}.csv").write_text(
                snapshots_to_csv(rep.snapshots))
            if rep.trace is not None:
                _write_trace(rep.trace, out / f"trace_seed{rep.seed}.jsonl")
        (out / "snapshots_mean.csv").write_text(_mean_csv(replicates))
        (out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
        total_events = config.events * len(config.replicates)
        (out / "timing.json").write_text(json.dumps({
            "wall_seconds": wall,
            "total_events": total_events,
            "seconds_per_event": wall / max(1, total_events),
        }, indent=2, sort_keys=True) + "\n")
    return result


def run_sgd_reference(oracle, steps, events: int, seed: int) -> np.ndarray:
    """Plain stochastic gradient loop on the summed objective.

    With a single-component oracle this uses exactly the draw labels of the
    network run (initial label 0, event-k label 1+k), so the two iterate
    sequences can be compared value for value.  With several components it
    sums per-component draws under its own labeling.
    """
    n = oracle.n
    m = oracle.m
    traj = np.empty((events + 1, n))
    x = np.zeros(n)
    traj[0] = x

    def full_stoch_grad(x, k):
        if m == 1:
            label = 0 if k is None else 1 + k
            return oracle.stoch_grad(0, x, SampleDraw(seed, label))
        total = np.zeros(n)
        for i in range(m):
            label = i if k is None else m + k * m + i
            total += oracle.stoch_grad(i, x, SampleDraw(seed, label))
        return total

    g = full_stoch_grad(x, None)
    for k in range(events):
        x = x - steps.gamma(k) * g
        g = full_stoch_grad(x, k)
        traj[k + 1] = x
    return traj


def sweep(items, output_dir=None) -> dict:
    """Run several configs and aggregate terminal metrics plus rate fits.

    `items` is a list of (key_value, ExperimentConfig).  Failures are
    recorded per entry and do not abort the other runs.
    """
    entries = []
    timing = []
    for key_value, cfg in items:
        sub = None
        if output_dir is not None:
            sub = Path(output_dir) / "runs" / str(key_value)
        try:
            t0 = time.perf_counter()
            result = run_experiment(cfg, output_dir=sub)
            wall = time.perf_counter() - t0
            entries.append({
                "key_value": key_value,
                "config_hash": result.config_hash,
                "terminal": result.summary["terminal"],
                "rates": result.summary["rates"],
                "events": cfg.events,
            })
            timing.append({
                "key_value": key_value,
                "wall_seconds": wall,
                "seconds_per_event": wall / max(1, cfg.events * len(cfg.replicates)),
            })
        except Exception as exc:  # noqa: BLE001 - partial results by contract
            entries.append({"key_value": key_value, "error": str(exc)})
    out = {"entries": entries}
    if output_dir is not None:
        outp = Path(output_dir)
        outp.mkdir(parents=True, exist_ok=True)
        (outp / "sweep_summary.json").write_text(
            json.dumps(out, indent=2, sort_keys=True) + "\n")
        (outp / "sweep_timing.json").write_text(
            json.dumps({"entries": timing}, indent=2, sort_keys=True) + "\n")
    return out


def replay(config: ExperimentConfig, trace_events, seed: int | None = None,
           output_dir=None) -> tuple[list[MetricsSnapshot], float | None]:
    """Re-execute a dumped trace: same events, same step sizes, same draws.

    Returns the recomputed snapshots and, when the trace carries recorded
    conservation residuals, the largest absolute difference between the
    recorded and recomputed values.
    """
    graph, mixing, oracle, steps = config.validate()
    D = config.schedule["delay"].get("D", 0)
    noise_seed = seed if seed is not None else config.replicates[0]
    proto = TrackingProtocol(oracle, graph, mixing, noise_seed=noise_seed,
                             shadow=config.shadow, max_delay=D)
    wc = WeightChannel(graph, mixing)
    snaps = []
    max_d = 0
    worst_gap = None
    n_events = len(trace_events)
    for k, ev in enumerate(trace_events):
        if k % config.snapshot_interval == 0:
            snaps.append(collect_snapshot(proto, k, ev.agent, wc, D, max_d))
        if ev.delays:
            max_d = max(max_d, max(ev.delays.values()))
        gamma = getattr(ev, "gamma", None)
        if gamma is None:
            gamma = steps.gamma(k)
        rec = proto.activate(k, ev.agent, ev.delays, gamma)
        wc.apply(k, ev.agent, rec.taus)
        recorded = getattr(ev, "residual", None)
        if recorded is not None:
            gap = abs(mass_residual(proto.states, graph) - recorded)
            worst_gap = gap if worst_gap is None else max(worst_gap, gap)
    if output_dir is not None:
        outp = Path(output_dir)
        outp.mkdir(parents=True, exist_ok=True)
        (outp / "replay_snapshots.csv").write_text(snapshots_to_csv(snaps))
    return snaps, worst_gap


def load_protocol_trace(path) -> list[EventRecord]:
    """Read a dumped protocol trace (a superset of the schedule format)."""
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        records.append(EventRecord(
            k=int(rec["k"]), agent=int(rec["agent"]),
            gamma=float(rec["gamma"]) if "gamma" in rec else None,
            delays={int(j): int(d) for j, d in rec["delays"].items()},
            taus={int(j): int(t) for j, t in rec.get("taus", {}).items()},
            residual=rec.get("residual"),
        ))
    return records
