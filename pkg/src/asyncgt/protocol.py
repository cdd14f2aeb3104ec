"""Per-agent state machine for asynchronous SGD with push-sum gradient tracking.

One global event activates one agent, which (1) takes a gradient step along
its tracking vector, (2) averages its fresh value with possibly stale
neighbor publications under row-stochastic weights, and (3) refreshes its
tracking vector: it collects the neighbor mass it has not consumed yet by
differencing cumulative mass counters against its local buffers, applies a
gradient correction, then splits the result between itself and its
out-neighbors under column-stochastic weights.  Cumulative counters make
stale or repeated reads harmless; a max rule on publication stamps makes
sure information is only ever consumed forward in time.

The simulated wire is an append-only per-sender log of publications; a
reader picks the newest publication no newer than its permitted staleness.
Every agent also carries an optional shadow channel: the identical linear
bookkeeping run on exact gradients instead of noisy ones, which makes the
tracking/consensus error diagnostics computable.
"""

from __future__ import annotations

from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .digraph import Digraph, MixingPair
from .oracles import SampleDraw


class MissingPublicationError(RuntimeError):
    """A stamp lookup failed; this indicates a simulator bug, not a protocol state."""


@dataclass(frozen=True)
class Publication:
    """One sender's broadcast at one stamp: consensus payload plus counters."""

    sender: int
    stamp: int
    v: np.ndarray
    rho: dict[int, np.ndarray]
    rho_shadow: dict[int, np.ndarray] | None


class NetworkStore:
    """Append-only per-sender publication log (the simulated wire)."""

    def __init__(self, m: int):
        self._stamps: list[list[int]] = [[] for _ in range(m)]
        self._pubs: list[list[Publication]] = [[] for _ in range(m)]

    def append(self, pub: Publication) -> None:
        stamps = self._stamps[pub.sender]
        if stamps and pub.stamp <= stamps[-1]:
            raise ValueError("publication stamps must increase per sender")
        stamps.append(pub.stamp)
        self._pubs[pub.sender].append(pub)

    def latest_index_at_or_before(self, sender: int, stamp_limit: int) -> int:
        """Index of the newest publication with stamp <= stamp_limit, or -1."""
        return bisect_right(self._stamps[sender], stamp_limit) - 1

    def at_index(self, sender: int, idx: int) -> Publication:
        return self._pubs[sender][idx]

    def stamp_at(self, sender: int, idx: int) -> int:
        return self._stamps[sender][idx]

    def exact(self, sender: int, stamp: int) -> Publication:
        idx = self.latest_index_at_or_before(sender, stamp)
        if idx < 0 or self._stamps[sender][idx] != stamp:
            raise MissingPublicationError(f"sender {sender} never published stamp {stamp}")
        return self._pubs[sender][idx]

    def newest_stamp(self, sender: int) -> int:
        return self._stamps[sender][-1]


@dataclass
class AgentState:
    """Everything one agent owns; untouched except during its own activation."""

    id: int
    x: np.ndarray
    z: np.ndarray
    g_last: np.ndarray
    tau: dict[int, int]
    tau_idx: dict[int, int]
    rho_out: dict[int, np.ndarray]
    rho_buf: dict[int, np.ndarray]
    v_history: deque
    z_shadow: np.ndarray | None = None
    g_last_shadow: np.ndarray | None = None
    rho_out_shadow: dict[int, np.ndarray] | None = None
    rho_buf_shadow: dict[int, np.ndarray] | None = None

    def v_at(self, stamp_limit: int) -> np.ndarray:
        """Newest published v with stamp <= stamp_limit (from the ring buffer)."""
        for stamp, v in reversed(self.v_history):
            if stamp <= stamp_limit:
                return v
        raise MissingPublicationError(
            f"agent {self.id} has no retained publication at or before {stamp_limit}"
        )


@dataclass(frozen=True)
class EventRecord:
    """Audit record of one applied event."""

    k: int
    agent: int
    gamma: float
    delays: dict[int, int]
    taus: dict[int, int]
    residual: float | None = None


class TrackingProtocol:
    """Deterministic single-threaded execution of the full agent network.

    Draw labels: agent i's initial gradient uses label i; the event-k
    gradient uses label m + k.  This convention is shared with the
    single-node reference loop so the two can be compared draw for draw.
    """

    def __init__(self, oracle, graph: Digraph, mixing: MixingPair,
                 noise_seed: int = 0, shadow: bool = True,
                 max_delay: int | None = None):
        mixing.validate(graph)
        self.oracle = oracle
        self.graph = graph
        self.mixing = mixing
        self.noise_seed = int(noise_seed)
        self.shadow = bool(shadow)
        self.m = graph.m
        self.n = oracle.n
        if oracle.m != graph.m:
            raise ValueError("oracle component count must match agent count")
        # history must reach back max_delay+1 iterations for stamp lookups
        self._hist_len = None if max_delay is None else max_delay + 2

        self._in = [graph.in_neighbors(i) for i in range(self.m)]
        self._out = [graph.out_neighbors(i) for i in range(self.m)]
        W, A = mixing.W, mixing.A
        self._w_self = [W[i, i] for i in range(self.m)]
        self._w_in = [[W[i, j] for j in self._in[i]] for i in range(self.m)]
        self._a_self = [A[i, i] for i in range(self.m)]
        self._a_out = [[A[j, i] for j in self._out[i]] for i in range(self.m)]

        self.store = NetworkStore(self.m)
        self.states = self._init_states()

    # -- initialization ------------------------------------------------------

    def _init_states(self) -> list[AgentState]:
        states = []
        for i in range(self.m):
            x0 = np.zeros(self.n)
            draw = SampleDraw(self.noise_seed, i)
            g0 = self.oracle.stoch_grad(i, x0, draw)
            st = AgentState(
                id=i,
                x=x0,
                z=g0.copy(),
                g_last=g0.copy(),
                tau={j: 0 for j in self._in[i]},
                tau_idx={j: 0 for j in self._in[i]},
                rho_out={j: np.zeros(self.n) for j in self._out[i]},
                rho_buf={j: np.zeros(self.n) for j in self._in[i]},
                v_history=deque(maxlen=self._hist_len),
            )
            if self.shadow:
                gbar = self.oracle.grad(i, x0)
                st.z_shadow = gbar.copy()
                st.g_last_shadow = gbar.copy()
                st.rho_out_shadow = {j: np.zeros(self.n) for j in self._out[i]}
                st.rho_buf_shadow = {j: np.zeros(self.n) for j in self._in[i]}
            pub = Publication(
                sender=i, stamp=0, v=x0,
                rho={j: np.zeros(self.n) for j in self._out[i]},
                rho_shadow=(
                    {j: np.zeros(self.n) for j in self._out[i]} if self.shadow else None
                ),
            )
            self.store.append(pub)
            st.v_history.append((0, x0))
            states.append(st)
        return states

    # -- protocol steps ------------------------------------------------------

    def select_stamp(self, i: int, j: int, k: int, d_j: int) -> int:
        """Record and return the stamp agent i uses from in-neighbor j.

        Max rule: the newest publication no newer than k - d_j, but never
        older than what was already consumed, so late arrivals of stale
        information are ignored.
        """
        if d_j < 0:
            raise ValueError("delays must be non-negative")
        st = self.states[i]
        idx = self.store.latest_index_at_or_before(j, k - d_j)
        if idx > st.tau_idx[j]:
            st.tau_idx[j] = idx
            st.tau[j] = self.store.stamp_at(j, idx)
        return st.tau[j]

    def sgd_step(self, i: int, gamma: float) -> np.ndarray:
        """Fresh consensus payload: current model minus gamma times the tracker."""
        if not (0.0 <= gamma <= 1.0):
            raise ValueError(f"step size {gamma} outside [0, 1]")
        st = self.states[i]
        return st.x - gamma * st.z

    def consensus_step(self, i: int, v_new: np.ndarray,
                       fetched_v: dict[int, np.ndarray]) -> np.ndarray:
        """Row-stochastic average of the fresh payload with stale neighbor payloads."""
        x_new = self._w_self[i] * v_new
        for j, w in zip(self._in[i], self._w_in[i]):
            x_new += w * fetched_v[j]
        return x_new

    def tracking_update(self, i: int, fetched_rho: dict[int, np.ndarray],
                        g_new: np.ndarray, shadow: bool = False) -> None:
        """Collect unconsumed neighbor mass, correct the gradient, split and push.

        Subtracting the cached gradient before anything else makes the
        correction telescope exactly: an isolated agent's tracker is always
        bit-for-bit the latest gradient.
        """
        st = self.states[i]
        if shadow:
            z, g_last = st.z_shadow, st.g_last_shadow
            rho_out, rho_buf = st.rho_out_shadow, st.rho_buf_shadow
        else:
            z, g_last = st.z, st.g_last
            rho_out, rho_buf = st.rho_out, st.rho_buf

        z_half = z - g_last
        for j in self._in[i]:
            z_half += fetched_rho[j]
            z_half -= rho_buf[j]
        z_half += g_new

        z_new = self._a_self[i] * z_half
        for j, a in zip(self._out[i], self._a_out[i]):
            rho_out[j] += a * z_half
        for j in self._in[i]:
            rho_buf[j] = fetched_rho[j].copy()

        if shadow:
            st.z_shadow = z_new
            st.g_last_shadow = g_new
        else:
            st.z = z_new
            st.g_last = g_new

    def activate(self, k: int, agent: int, delays: dict[int, int], gamma: float,
                 draw: SampleDraw | None = None) -> EventRecord:
        """Run one full event for one agent; all other agents stay untouched."""
        i = agent
        st = self.states[i]
        if set(delays) != set(self._in[i]):
            raise ValueError("delays must cover exactly the in-neighbors")

        taus = {j: self.select_stamp(i, j, k, delays[j]) for j in self._in[i]}
        fetched = {j: self.store.at_index(j, st.tau_idx[j]) for j in self._in[i]}

        v_new = self.sgd_step(i, gamma)
        x_new = self.consensus_step(i, v_new, {j: p.v for j, p in fetched.items()})

        if draw is None:
            draw = SampleDraw(self.noise_seed, self.m + k)
        g_new = self.oracle.stoch_grad(i, x_new, draw)
        self.tracking_update(i, {j: p.rho[i] for j, p in fetched.items()}, g_new)
        if self.shadow:
            gbar_new = self.oracle.grad(i, x_new)
            self.tracking_update(
                i, {j: p.rho_shadow[i] for j, p in fetched.items()},
                gbar_new, shadow=True,
            )
        st.x = x_new

        pub = Publication(
            sender=i, stamp=k + 1, v=v_new,
            rho={j: st.rho_out[j].copy() for j in self._out[i]},
            rho_shadow=(
                {j: st.rho_out_shadow[j].copy() for j in self._out[i]}
                if self.shadow else None
            ),
        )
        self.store.append(pub)
        st.v_history.append((k + 1, v_new))
        return EventRecord(k=k, agent=i, gamma=gamma, delays=dict(delays), taus=taus)


def init_states(oracle, graph: Digraph, mixing: MixingPair, noise_seed: int = 0,
                shadow: bool = True, max_delay: int | None = None) -> TrackingProtocol:
    """Fresh protocol: x = 0, trackers seeded with the gradient at 0, counters
    and buffers zeroed, and a stamp-0 publication per agent so stamp
    selection is total from the first event."""
    return TrackingProtocol(oracle, graph, mixing, noise_seed=noise_seed,
                            shadow=shadow, max_delay=max_delay)
