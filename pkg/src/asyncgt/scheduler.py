"""Activation sequences and delay assignments with enforced bounds.

One global event activates exactly one agent and fixes, for each of that
agent's in-neighbors, how stale the information read from it is.  The
generators here enforce the two structural guarantees the protocol needs
deterministically, not just in expectation:

* coverage -- every window of T consecutive events activates every agent
  at least once (starvation override: an agent whose window is about to
  close is forced);
* bounded delay -- every assigned delay lies in [0, D] (hard clamp).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .digraph import Digraph


@dataclass(frozen=True)
class ScheduleEvent:
    """One global iteration: who activates and how stale each neighbor read is."""

    k: int
    agent: int
    delays: dict[int, int]


class ActivationPolicy:
    """Stateful agent selector; call next(k) for k = 0, 1, 2, ... in order."""

    def __init__(self, m: int, mode: str, T: int | None = None,
                 seed: int = 0, weights=None):
        if m < 1:
            raise ValueError("m must be positive")
        if mode not in ("round-robin", "random-with-coverage",
                        "weighted-random-with-coverage"):
            raise ValueError(f"unknown activation mode {mode!r}")
        self.m = m
        self.mode = mode
        self.seed = seed
        if mode == "round-robin":
            self.T = m if T is None else T
            if self.T < m:
                raise ValueError(f"round-robin needs T >= m, got T={T}")
        else:
            if T is None or T < m:
                raise ValueError(f"coverage window T must be >= m, got {T}")
            self.T = T
        self._rng = np.random.default_rng(seed)
        # staggered virtual history: agent a "last activated" at a - m, so
        # initial deadlines are distinct and all fall inside the first window
        self._last = [a - m for a in range(m)]
        self._k = 0
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (m,) or np.any(weights <= 0):
                raise ValueError("weights must be m positive numbers")
            weights = weights / weights.sum()
        elif mode == "weighted-random-with-coverage":
            raise ValueError("weighted mode needs explicit weights")
        self.weights = weights

    def next(self, k: int) -> int:
        if k != self._k:
            raise ValueError(f"policy must be advanced in order; expected k={self._k}")
        self._k += 1
        if self.mode == "round-robin":
            agent = k % self.m
        else:
            # deadline k means: the window that started right after the
            # agent's previous activation closes now, so it must be picked
            due = [a for a in range(self.m) if self._last[a] + self.T <= k]
            if due:
                agent = min(due, key=lambda a: (self._last[a], a))
            elif self.weights is None:
                agent = int(self._rng.integers(0, self.m))
            else:
                agent = int(self._rng.choice(self.m, p=self.weights))
        self._last[agent] = k
        return agent


class DelayModel:
    """Assigns per-in-neighbor staleness for each event, always within [0, D]."""

    def __init__(self, g: Digraph, mode: str, D: int = 0, seed: int = 0,
                 table: dict | None = None):
        if D < 0:
            raise ValueError("D must be non-negative")
        if mode not in ("zero", "uniform", "per-edge-fixed", "heterogeneous-speed"):
            raise ValueError(f"unknown delay mode {mode!r}")
        self.g = g
        self.mode = mode
        self.D = int(D)
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        if mode == "per-edge-fixed":
            if table is not None:
                self._table = {e: int(d) for e, d in table.items()}
                if any(not (0 <= d <= self.D) for d in self._table.values()):
                    raise ValueError("fixed delays must lie in [0, D]")
            else:
                self._table = {
                    e: int(self._rng.integers(0, self.D + 1))
                    for e in sorted(g.edges)
                }
        elif mode == "heterogeneous-speed":
            # a sender's slowness is the floor of every delay on its edges
            self._slow = self._rng.integers(0, self.D + 1, size=g.m)

    def delays_for(self, k: int, agent: int) -> dict[int, int]:
        nbrs = self.g.in_neighbors(agent)
        if self.mode == "zero":
            return {j: 0 for j in nbrs}
        if self.mode == "per-edge-fixed":
            return {j: self._table[(j, agent)] for j in nbrs}
        if self.mode == "uniform":
            draws = self._rng.integers(0, self.D + 1, size=len(nbrs))
            return {j: int(d) for j, d in zip(nbrs, draws)}
        out = {}
        for j in nbrs:
            lo = int(self._slow[j])
            out[j] = int(self._rng.integers(lo, self.D + 1))
        return out


def next_event(policy: ActivationPolicy, delay_model: DelayModel, k: int) -> ScheduleEvent:
    agent = policy.next(k)
    return ScheduleEvent(k=k, agent=agent, delays=delay_model.delays_for(k, agent))


def generate_trace(policy, delay_model, length: int) -> list[ScheduleEvent]:
    return [next_event(policy, delay_model, k) for k in range(length)]


def verify_coverage(trace, T: int, m: int) -> bool:
    """True iff every window of T consecutive events activates all m agents."""
    if len(trace) < T:
        raise ValueError(f"trace of length {len(trace)} is shorter than T={T}")
    agents = [ev.agent for ev in trace]
    everyone = set(range(m))
    window = {}
    for a in agents[:T]:
        window[a] = window.get(a, 0) + 1
    if set(window) != everyone:
        return False
    for t in range(T, len(agents)):
        gone = agents[t - T]
        window[gone] -= 1
        if window[gone] == 0:
            del window[gone]
        window[agents[t]] = window.get(agents[t], 0) + 1
        if len(window) != m:
            return False
    return True


def verify_delay_bound(trace, D: int) -> bool:
    """True iff every assigned delay lies in [0, D]; vacuously true when empty."""
    for ev in trace:
        for d in ev.delays.values():
            if d < 0 or d > D:
                return False
    return True


def max_observed_delay(trace) -> int:
    best = 0
    for ev in trace:
        for d in ev.delays.values():
            if d > best:
                best = d
    return best


# -- line-delimited trace serialization ----------------------------------------


def save_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for ev in trace:
            rec = {"k": ev.k, "agent": ev.agent,
                   "delays": {str(j): d for j, d in ev.delays.items()}}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trace(path) -> list[ScheduleEvent]:
    trace = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        trace.append(ScheduleEvent(
            k=int(rec["k"]), agent=int(rec["agent"]),
            delays={int(j): int(d) for j, d in rec["delays"].items()},
        ))
    return trace
