"""Experiment configuration: schema, validation, builders, and hashing.

A config is plain JSON so that a run is fully reproducible from the file
alone.  Validation happens eagerly and reports the offending field; the
builders construct the graph, oracle, activation policy, delay model, and
step-size schedule from their sub-specs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import digraph, oracles
from .scheduler import ActivationPolicy, DelayModel


class ConfigError(ValueError):
    """Invalid configuration; carries the offending field path."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


def _require(spec: dict, key: str, where: str):
    if key not in spec:
        raise ConfigError(f"{where}.{key}", "missing required field")
    return spec[key]


def build_graph(spec: dict) -> digraph.Digraph:
    kind = _require(spec, "kind", "graph")
    try:
        if kind == "ring_plus_random":
            g = digraph.generate_ring_plus_random(
                _require(spec, "m", "graph"), _require(spec, "extra", "graph"),
                _require(spec, "seed", "graph"))
        elif kind == "connectivity":
            g = digraph.generate_connectivity(
                _require(spec, "m", "graph"), _require(spec, "p", "graph"),
                _require(spec, "seed", "graph"))
        elif kind == "edge_list":
            g = digraph.Digraph.from_edge_list(_require(spec, "text", "graph"))
        else:
            raise ConfigError("graph.kind", f"unknown graph kind {kind!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("graph", str(exc)) from exc
    if not digraph.is_strongly_connected(g):
        raise ConfigError("graph", "graph is not strongly connected")
    return g


def build_oracle(spec: dict):
    family = _require(spec, "family", "oracle")
    kwargs = {k: v for k, v in spec.items() if k != "family"}
    try:
        if family == "quadratic":
            if "sv_range" in kwargs:
                kwargs["sv_range"] = tuple(kwargs["sv_range"])
            return oracles.make_quadratic(**kwargs)
        if family == "sigmoid_wells":
            for key in ("c_range", "t_range"):
                if key in kwargs:
                    kwargs[key] = tuple(kwargs[key])
            return oracles.make_sigmoid_wells(**kwargs)
        if family == "logistic":
            return oracles.make_logistic(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("oracle", str(exc)) from exc
    raise ConfigError("oracle.family", f"unknown family {family!r}")


def build_policy(spec: dict, m: int) -> ActivationPolicy:
    policy = _require(spec, "policy", "schedule")
    try:
        return ActivationPolicy(
            m, policy, T=spec.get("T"),
            seed=spec.get("policy_seed", 0), weights=spec.get("weights"))
    except ValueError as exc:
        raise ConfigError("schedule.policy", str(exc)) from exc


def build_delay_model(spec: dict, g: digraph.Digraph) -> DelayModel:
    delay = _require(spec, "delay", "schedule")
    mode = _require(delay, "mode", "schedule.delay")
    try:
        return DelayModel(g, mode, D=delay.get("D", 0), seed=delay.get("seed", 0))
    except ValueError as exc:
        raise ConfigError("schedule.delay", str(exc)) from exc


class StepSchedule:
    """Step-size sequence; optionally frozen to zero after a warm-up.

    power-decay: gamma(k) = gamma0 / (k+1)^alpha with alpha in (1/2, 1] and
    gamma0 in (0, 1], which keeps the sum divergent and the squared sum
    finite.  stepwise: gamma0 divided by `factor` every `interval` events.
    """

    def __init__(self, mode: str, gamma0: float, alpha: float | None = None,
                 interval: int | None = None, factor: float | None = None,
                 freeze_after: int | None = None):
        if not (0.0 < gamma0 <= 1.0):
            raise ConfigError("steps.gamma0", f"must be in (0, 1], got {gamma0}")
        if mode == "power-decay":
            if alpha is None or not (0.5 < alpha <= 1.0):
                raise ConfigError("steps.alpha", f"must be in (1/2, 1], got {alpha}")
        elif mode == "stepwise":
            if interval is None or interval < 1:
                raise ConfigError("steps.interval", f"must be >= 1, got {interval}")
            if factor is None or factor <= 1.0:
                raise ConfigError("steps.factor", f"must be > 1, got {factor}")
        else:
            raise ConfigError("steps.mode", f"unknown mode {mode!r}")
        self.mode = mode
        self.gamma0 = float(gamma0)
        self.alpha = alpha
        self.interval = interval
        self.factor = factor
        self.freeze_after = freeze_after

    def gamma(self, k: int) -> float:
        if self.freeze_after is not None and k >= self.freeze_after:
            return 0.0
        if self.mode == "power-decay":
            return self.gamma0 / (k + 1) ** self.alpha
        return self.gamma0 / self.factor ** (k // self.interval)

    __call__ = gamma


def build_steps(spec: dict) -> StepSchedule:
    mode = _require(spec, "mode", "steps")
    return StepSchedule(
        mode, _require(spec, "gamma0", "steps"),
        alpha=spec.get("alpha"), interval=spec.get("interval"),
        factor=spec.get("factor"), freeze_after=spec.get("freeze_after"))


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run bit for bit."""

    graph: dict
    oracle: dict
    schedule: dict
    steps: dict
    events: int
    snapshot_interval: int
    replicates: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    shadow: bool = True
    dump_trace: bool = False

    def validate(self):
        """Construct every component once so all preconditions are checked
        up front; returns (graph, mixing, oracle, steps)."""
        g = build_graph(self.graph)
        mixing = digraph.build_mixing(g)
        oracle = build_oracle(self.oracle)
        if oracle.m != g.m:
            raise ConfigError("oracle.m", f"oracle has {oracle.m} components but graph has {g.m} agents")
        build_policy(self.schedule, g.m)
        build_delay_model(self.schedule, g)
        steps = build_steps(self.steps)
        if self.events < 1:
            raise ConfigError("events", f"must be >= 1, got {self.events}")
        if self.snapshot_interval < 1:
            raise ConfigError("snapshot_interval", f"must be >= 1, got {self.snapshot_interval}")
        if not self.replicates:
            raise ConfigError("replicates", "need at least one replicate seed")
        if any(s < 0 for s in self.replicates):
            raise ConfigError("replicates", "seeds must be non-negative")
        return g, mixing, oracle, steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {}
        for name in ("graph", "oracle", "schedule", "steps", "events", "snapshot_interval"):
            if name not in payload:
                raise ConfigError(name, "missing required field")
            known[name] = payload[name]
        for opt in ("replicates", "output_dir", "shadow", "dump_trace"):
            if opt in payload:
                known[opt] = payload[opt]
        extra = set(payload) - set(known)
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown field")
        return cls(**known)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(str(path), f"cannot read config: {exc}") from exc
        return cls.from_dict(payload)

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]
