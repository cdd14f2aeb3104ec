"""Error diagnostics, conservation audits, and the scalar weight channel.

Three squared-error terms drive the convergence diagnostics, all evaluated
on the exact-gradient shadow channel at the agent scheduled to act next:

* tracking error  -- how far that agent's tracker is from its estimated
  mass share of the network-wide tracker sum;
* consensus error -- squared distance of the augmented state (current
  models stacked with the last D+1 generations of published payloads) from
  the all-agents average model;
* gradient-norm error -- squared norm of that agent's shadow tracker.

Their sum is the merit value whose decay the runner rate-fits.

The mass share has no closed form online, so it is estimated by a weight
channel: a scalar replica of the push-sum bookkeeping with constant input
(everyone starts at weight 1 and no corrections are ever applied), driven
by the exact same activations and stamp selections as the real protocol.

The conservation audit checks the invariant that makes the tracking loop
trustworthy: tracker totals plus in-flight counter mass always equal the
sum of the most recent gradients, up to floating-point accumulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .digraph import Digraph, MixingPair


class WeightChannelColdError(RuntimeError):
    """The weight channel has a zero weight, so shares cannot be estimated."""


@dataclass(frozen=True)
class MetricsSnapshot:
    """One measurement row; taken before the event at iteration k is applied."""

    k: int
    e_t_hat: float
    e_c: float
    e_z: float
    merit: float
    grad_inf: float
    dev_inf_avg: float
    mass_residual: float
    max_delay_so_far: int
    f_avg: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return [getattr(self, name) for name in self.columns()]


def consensus_error(states, D: int, k: int | None = None) -> float:
    """Squared distance of the augmented state from the all-agent average model.

    The augmented state stacks each agent's current model with its payload
    values at iterations k, k-1, ..., k-D (piecewise-constant between
    publications).  Equals zero iff every block equals the average.
    """
    if k is None:
        k = max(st.v_history[-1][0] for st in states)
    m = len(states)
    x_avg = sum(st.x for st in states) / m
    total = 0.0
    for st in states:
        d = st.x - x_avg
        total += float(d @ d)
        for r in range(D + 1):
            # before iteration 0 every payload still holds its initial value
            d = st.v_at(max(k - r, 0)) - x_avg
            total += float(d @ d)
    return total


def tracking_error(states, weight_channel, active: int) -> float:
    """Squared distance of the active agent's shadow tracker from its share
    of the network-wide tracking mass.

    The total mass (trackers plus in-flight counters) equals the sum of the
    latest exact gradients by the conservation law, which is how it is
    computed here; the share is the weight-channel estimate.
    """
    st = states[active]
    if st.z_shadow is None:
        raise ValueError("tracking error needs the shadow channel enabled")
    share = weight_channel.estimate(active)
    g_sum = sum(s.g_last_shadow for s in states)
    d = st.z_shadow - share * g_sum
    return float(d @ d)


def gradient_norm_error(states, active: int) -> float:
    st = states[active]
    if st.z_shadow is None:
        raise ValueError("gradient-norm error needs the shadow channel enabled")
    return float(st.z_shadow @ st.z_shadow)


def merit(snapshot: MetricsSnapshot) -> float:
    return snapshot.e_t_hat + snapshot.e_c + snapshot.e_z


def mass_residual(states, graph: Digraph, channel: str = "stochastic") -> float:
    """Sup-norm of (tracker totals + in-flight counter mass - gradient totals).

    Compensated summation keeps the audit's own rounding below the
    tolerances it is used to check.
    """
    if channel not in ("stochastic", "shadow"):
        raise ValueError(f"unknown channel {channel!r}")
    shadow = channel == "shadow"
    n = states[0].x.shape[0]
    worst = 0.0
    for coord in range(n):
        terms = []
        for st in states:
            if shadow:
                terms.append(st.z_shadow[coord])
                terms.append(-st.g_last_shadow[coord])
            else:
                terms.append(st.z[coord])
                terms.append(-st.g_last[coord])
        for i, j in graph.edges:
            if shadow:
                terms.append(states[i].rho_out_shadow[j][coord])
                terms.append(-states[j].rho_buf_shadow[i][coord])
            else:
                terms.append(states[i].rho_out[j][coord])
                terms.append(-states[j].rho_buf[i][coord])
        worst = max(worst, abs(math.fsum(terms)))
    return worst


class WeightChannel:
    """Constant-input scalar replica of the push-sum mass bookkeeping.

    Seeded with weight 1 per agent and zero correction, it is driven by the
    same (agent, stamp-selection) sequence as the protocol, so each weight
    divided by m estimates that agent's asymptotic mass share.  The same
    conservation law holds: weights plus in-flight scalar mass total m.
    """

    def __init__(self, graph: Digraph, mixing: MixingPair):
        self.graph = graph
        m = graph.m
        self._in = [graph.in_neighbors(i) for i in range(m)]
        self._out = [graph.out_neighbors(i) for i in range(m)]
        A = mixing.A
        self._a_self = [A[i, i] for i in range(m)]
        self._a_out = [[A[j, i] for j in self._out[i]] for i in range(m)]
        self.m = m
        self.w = np.ones(m)
        self.rho_out = [{j: 0.0 for j in self._out[i]} for i in range(m)]
        self.rho_buf = [{j: 0.0 for j in self._in[i]} for i in range(m)]
        # per-sender stamp -> {receiver: counter} snapshots; stamp 0 seeded
        self._log = [{0: {j: 0.0 for j in self._out[i]}} for i in range(m)]

    def apply(self, k: int, agent: int, taus: dict[int, int]) -> None:
        i = agent
        w_half = self.w[i]
        for j in self._in[i]:
            snap = self._log[j][taus[j]][i]
            w_half += snap - self.rho_buf[i][j]
            self.rho_buf[i][j] = snap
        self.w[i] = self._a_self[i] * w_half
        for j, a in zip(self._out[i], self._a_out[i]):
            self.rho_out[i][j] += a * w_half
        self._log[i][k + 1] = dict(self.rho_out[i])

    def estimate(self, i: int) -> float:
        if np.any(self.w <= 0.0):
            raise WeightChannelColdError("weight channel has a non-positive weight")
        return self.w[i] / self.m

    def conservation_residual(self) -> float:
        terms = list(self.w)
        for i, j in self.graph.edges:
            terms.append(self.rho_out[i][j])
            terms.append(-self.rho_buf[j][i])
        return abs(math.fsum(terms) - self.m)


def collect_snapshot(protocol, k: int, next_agent: int,
                     weight_channel: WeightChannel, D: int,
                     max_delay_so_far: int) -> MetricsSnapshot:
    """Assemble one measurement row from the pre-event state at iteration k."""
    states = protocol.states
    oracle = protocol.oracle
    m = len(states)
    x_avg = sum(st.x for st in states) / m

    e_t = tracking_error(states, weight_channel, next_agent)
    e_c = consensus_error(states, D, k=k)
    e_z = gradient_norm_error(states, next_agent)
    grad_inf = float(np.max(np.abs(oracle.full_grad_sum(x_avg))))
    dev = sum(float(np.max(np.abs(st.x - x_avg))) for st in states) / m
    residual = mass_residual(states, protocol.graph)
    return MetricsSnapshot(
        k=k,
        e_t_hat=e_t,
        e_c=e_c,
        e_z=e_z,
        merit=e_t + e_c + e_z,
        grad_inf=grad_inf,
        dev_inf_avg=dev,
        mass_residual=residual,
        max_delay_so_far=max_delay_so_far,
        f_avg=oracle.value_sum(x_avg),
    )
